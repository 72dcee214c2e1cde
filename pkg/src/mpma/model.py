"""Shared vision encoder/decoder, report encoder/decoder, fusion and alignment heads.

Parameters are a flat ``name -> array`` dict. Forward functions take the
same names mapped to :class:`~mpma.autodiff.Tensor` (watched on a tape for
training, plain for evaluation), so one code path serves both.

Every batch function takes batched inputs: images ``(B, C, H, W)``,
report ids ``(B, M)`` and one :class:`~mpma.masking.MaskPlan` per item.
"""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from . import objectives as obj
from .autodiff import ShapeError, Tensor
from .masking import MaskPlan, derive_seed, patchify_batch

FUSION_KINDS = ("GAP", "GMP", "CMF", "MA_CMF")

Params = Mapping[str, Tensor]


@dataclass
class ModelConfig:
    d: int = 32
    heads: int = 2
    depth_enc_v: int = 1
    depth_dec_v: int = 1
    depth_enc_t: int = 1
    depth_dec_t: int = 1
    patch: int = 8
    channels: int = 1
    height: int = 32
    width: int = 32
    report_len: int = 16
    vocab_size: int = 64
    mem_slots: int = 32
    fusion_kind: str = "MA_CMF"
    scale_mode: str = "per_head"
    mlp_ratio: int = 4
    pos_kind: str = "learned"
    tau1: float = 0.1
    tau2: float = 0.1
    tau3: float = 0.1
    # "full": fusion consumes E_I(I); "masked": fusion consumes E_I(I_u)
    fusion_source: str = "full"
    fusion_residual: bool = True
    normalize_global: bool = True
    freeze_text_encoder: bool = False
    mask_cls: bool = False
    precision: int = 32

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(f"image {self.height}x{self.width} not divisible by patch {self.patch}")
        if self.fusion_kind not in FUSION_KINDS:
            raise ValueError(f"fusion_kind must be one of {FUSION_KINDS}, got {self.fusion_kind!r}")
        if self.fusion_source not in ("full", "masked"):
            raise ValueError(f"fusion_source must be 'full' or 'masked', got {self.fusion_source!r}")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if self.mem_slots < 0:
            raise ValueError("mem_slots must be non-negative")
        for name in ("tau1", "tau2", "tau3"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.report_len < 2:
            raise ValueError("report_len must be at least 2")

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    @property
    def effective_slots(self) -> int:
        return self.mem_slots if self.fusion_kind == "MA_CMF" else 0

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class ForwardOutputs:
    recon_patches: Tensor  # (B*h, P*P*C), ascending masked index within each item
    ground_truth: np.ndarray
    mlm_logits: Tensor  # (n, V) over all masked report positions of the batch
    mlm_targets: np.ndarray
    v_global: Tensor  # (B, N_p, d) = E_I(I)
    t_global: Tensor  # (B, M, d) text-encoder output
    v_m: Tensor  # (B, D) pooled image vectors
    t_m: Tensor  # (B, D) pooled report vectors
    t_m_tokens: Tensor  # (B, M, D)
    alpha: Tensor  # (B, N_p, M)
    losses: dict = field(default_factory=dict)

    def s(self) -> np.ndarray:
        return np.einsum("bpd,bmd->bpm", self.v_global.data, self.t_m_tokens.data)


# ---------------------------------------------------------------------------
# parameters


def param_specs(cfg: ModelConfig) -> dict[str, tuple]:
    """Ordered ``name -> (shape, init)`` for every learnable array."""
    d, npch, m, vocab = cfg.d, cfg.n_patches, cfg.report_len, cfg.vocab_size
    specs: dict[str, tuple] = {}

    def blocks(prefix: str, depth: int):
        for i in range(depth):
            for k, v in nn.block_param_specs(d, cfg.mlp_ratio).items():
                specs[f"{prefix}.{i}.{k}"] = v

    learned = cfg.pos_kind == "learned"
    specs["vis.patch.w"] = ((cfg.patch_dim, d), "normal")
    specs["vis.patch.b"] = ((d,), "zeros")
    if learned:
        specs["vis.pos"] = ((npch, d), "normal")
    blocks("vis.enc", cfg.depth_enc_v)
    specs["vis.dec.mask_token"] = ((d,), "normal")
    if learned:
        specs["vis.dec.pos"] = ((npch, d), "normal")
    blocks("vis.dec", cfg.depth_dec_v)
    specs["vis.dec.ln.g"] = ((d,), "ones")
    specs["vis.dec.ln.b"] = ((d,), "zeros")
    specs["vis.dec.head.w"] = ((d, cfg.patch_dim), "normal")
    specs["vis.dec.head.b"] = ((cfg.patch_dim,), "zeros")

    specs["txt.emb"] = ((vocab, d), "normal")
    if learned:
        specs["txt.pos"] = ((m, d), "normal")
    if cfg.fusion_kind in ("CMF", "MA_CMF"):
        for side in ("v", "t"):
            for k, v in nn.attention_param_specs(d).items():
                specs[f"fuse.{side}.{k}"] = v
        specs["fuse.mem_v"] = ((cfg.effective_slots, d), "normal")
        specs["fuse.mem_t"] = ((cfg.effective_slots, d), "normal")
    blocks("tdec", cfg.depth_dec_t)
    specs["tdec.ln.g"] = ((d,), "ones")
    specs["tdec.ln.b"] = ((d,), "zeros")
    specs["tdec.head.w"] = ((d, vocab), "normal")
    specs["tdec.head.b"] = ((vocab,), "zeros")

    specs["tenc.emb"] = ((vocab, d), "normal")
    if learned:
        specs["tenc.pos"] = ((m, d), "normal")
    blocks("tenc", cfg.depth_enc_t)
    specs["gla.wv"] = ((m, npch), "normal")
    specs["gla.wt"] = ((d, d), "normal")
    return specs


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Each array draws from its own generator keyed by ``(seed, crc32(name))``.

    Arrays therefore do not depend on which other arrays exist, e.g. the
    CMF and MA_CMF(S=0) configurations initialize identically.
    """
    out = {}
    for name, (shape, init) in param_specs(cfg).items():
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, zlib.crc32(name.encode()))))
        out[name] = nn.init_array(rng, shape, init, cfg.dtype)
    return out


def frozen_names(cfg: ModelConfig, names) -> set:
    return {n for n in names if n.startswith("tenc.")} if cfg.freeze_text_encoder else set()


def as_constants(params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


def _const(x, cfg: ModelConfig) -> Tensor:
    return Tensor(np.asarray(x, dtype=cfg.dtype))


def _pos(p: Params, name: str, length: int, cfg: ModelConfig) -> Tensor:
    if cfg.pos_kind == "learned":
        return p[name]
    return _const(nn.sinusoidal_table(length, cfg.d), cfg)


def _stack(p: Params, prefix: str, depth: int, x: Tensor, cfg: ModelConfig, key_valid=None) -> Tensor:
    for i in range(depth):
        x = nn.transformer_block(x, nn.BlockParams.view(p, f"{prefix}.{i}", cfg.heads, cfg.scale_mode), key_valid)
    return x


def _check_plans(plans: Sequence[MaskPlan], batch: int, total: int) -> int:
    if len(plans) != batch:
        raise ShapeError(f"{len(plans)} mask plans for a batch of {batch}")
    counts = {pl.n_masked for pl in plans}
    if len(counts) != 1 or any(pl.total != total for pl in plans):
        raise ShapeError(f"mask plans must all cover {total} positions with one masked count")
    return counts.pop()


# ---------------------------------------------------------------------------
# vision branch


def embed_patches(patches: Tensor, p: Params, cfg: ModelConfig) -> Tensor:
    """``patches @ W_l1 + b + E_pos1`` for a batch ``(B, N_p, P*P*C)``."""
    if patches.ndim != 3 or patches.shape[1:] != (cfg.n_patches, cfg.patch_dim):
        raise ShapeError(f"expected patches (B, {cfg.n_patches}, {cfg.patch_dim}), got {patches.shape}")
    e = ad.linear(patches, p["vis.patch.w"], p["vis.patch.b"])
    return ad.add(e, nn.tile_rows(_pos(p, "vis.pos", cfg.n_patches, cfg), patches.shape[0]))


def _visible_rows(plans: Sequence[MaskPlan], n: int) -> np.ndarray:
    return np.concatenate([b * n + pl.visible for b, pl in enumerate(plans)])


def _masked_rows(plans: Sequence[MaskPlan], n: int) -> np.ndarray:
    return np.concatenate([b * n + pl.masked for b, pl in enumerate(plans)])


def encode_image_masked(visible_patches, plans: Sequence[MaskPlan], p: Params, cfg: ModelConfig) -> Tensor:
    """Encode only the visible patches: ``(B, N_p - h, P*P*C) -> (B, N_p - h, d)``.

    Position rows are gathered at each item's visible indices.
    """
    vp = visible_patches if isinstance(visible_patches, Tensor) else _const(visible_patches, cfg)
    single = vp.ndim == 2
    if single:
        vp = ad.reshape(vp, (1,) + vp.shape)
        plans = [plans] if isinstance(plans, MaskPlan) else plans
    b, nv = vp.shape[0], vp.shape[1]
    h = _check_plans(plans, b, cfg.n_patches)
    if nv != cfg.n_patches - h or vp.shape[2] != cfg.patch_dim:
        raise ShapeError(f"visible patches {vp.shape} do not match plan ({cfg.n_patches - h} rows)")
    e = ad.linear(vp, p["vis.patch.w"], p["vis.patch.b"])
    pos_rows = np.concatenate([pl.visible for pl in plans])
    pos = ad.reshape(ad.gather(_pos(p, "vis.pos", cfg.n_patches, cfg), pos_rows), (b, nv, cfg.d))
    out = _stack(p, "vis.enc", cfg.depth_enc_v, ad.add(e, pos), cfg)
    return ad.reshape(out, out.shape[1:]) if single else out


def encode_image_full(images, p: Params, cfg: ModelConfig) -> Tensor:
    """``v = E_I(I)`` on unmasked images ``(B, C, H, W) -> (B, N_p, d)``."""
    imgs = np.asarray(images.data if isinstance(images, Tensor) else images)
    single = imgs.ndim == 3
    if single:
        imgs = imgs[None]
    if imgs.shape[1:] != (cfg.channels, cfg.height, cfg.width):
        raise ShapeError(f"images {imgs.shape} do not match config {(cfg.channels, cfg.height, cfg.width)}")
    patches = _const(patchify_batch(imgs, cfg.patch), cfg)
    out = _stack(p, "vis.enc", cfg.depth_enc_v, embed_patches(patches, p, cfg), cfg)
    return ad.reshape(out, out.shape[1:]) if single else out


def decode_image(encoded_visible: Tensor, plans: Sequence[MaskPlan], p: Params, cfg: ModelConfig) -> Tensor:
    """Reconstruct masked patches: returns ``(B*h, P*P*C)`` in item-major, ascending-index order."""
    single = encoded_visible.ndim == 2
    if single:
        encoded_visible = ad.reshape(encoded_visible, (1,) + encoded_visible.shape)
        plans = [plans] if isinstance(plans, MaskPlan) else plans
    b, nv, d = encoded_visible.shape
    n = cfg.n_patches
    h = _check_plans(plans, b, n)
    if nv != n - h:
        raise ShapeError(f"decoder got {nv} encoded rows, plans expect {n - h}")
    # rows [0, b*nv) are encoded patches, rows [b*nv, b*n) are mask tokens
    src = np.empty(b * n, dtype=np.intp)
    for i, pl in enumerate(plans):
        src[i * n + pl.visible] = i * nv + np.arange(nv)
        src[i * n + pl.masked] = b * nv + i * h + np.arange(h)
    tokens = ad.gather(ad.reshape(p["vis.dec.mask_token"], (1, d)), np.zeros(b * h, dtype=np.intp))
    rows = ad.concat([ad.reshape(encoded_visible, (b * nv, d)), tokens], axis=0)
    x = ad.reshape(ad.gather(rows, src), (b, n, d))
    x = ad.add(x, nn.tile_rows(_pos(p, "vis.dec.pos", n, cfg), b))
    x = _stack(p, "vis.dec", cfg.depth_dec_v, x, cfg)
    x = ad.layer_norm(x, p["vis.dec.ln.g"], p["vis.dec.ln.b"])
    picked = ad.gather(ad.reshape(x, (b * n, d)), _masked_rows(plans, n))
    return ad.linear(picked, p["vis.dec.head.w"], p["vis.dec.head.b"])


# ---------------------------------------------------------------------------
# text branch


def _check_ids(ids: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.shape[-1] != cfg.report_len:
        raise ShapeError(f"report length {ids.shape[-1]} != configured {cfg.report_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError(f"token id outside vocabulary of {cfg.vocab_size}")
    return ids


def embed_report(ids, p: Params, cfg: ModelConfig) -> Tensor:
    """Fusion-side report embedding ``E_t = R W_l2 + E_pos2``: ``(B, M) -> (B, M, d)``."""
    ids = _check_ids(ids, cfg)
    e = ad.embedding(p["txt.emb"], ids)
    return ad.add(e, nn.tile_rows(_pos(p, "txt.pos", cfg.report_len, cfg), ids.shape[0]))


def encode_report(ids, p: Params, cfg: ModelConfig, valid: Optional[np.ndarray] = None) -> Tensor:
    """Alignment-side text encoder ``t``: ``(B, M) -> (B, M, d)``; pads are masked as keys."""
    ids = _check_ids(ids, cfg)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
        valid = None if valid is None else np.asarray(valid)[None]
    e = ad.embedding(p["tenc.emb"], ids)
    x = ad.add(e, nn.tile_rows(_pos(p, "tenc.pos", cfg.report_len, cfg), ids.shape[0]))
    out = _stack(p, "tenc", cfg.depth_enc_t, x, cfg, valid)
    return ad.reshape(out, out.shape[1:]) if single else out


def fuse(v: Tensor, e_t: Tensor, p: Params, cfg: ModelConfig, report_valid: Optional[np.ndarray] = None) -> Tensor:
    """Cross-modal sequence fed to the report decoder.

    ``MA_CMF`` / ``CMF``: ``[C_v, C_Et]`` with ``C_v = MCA(v, [E_t, M_Et])`` and
    ``C_Et = MCA(E_t, [v, M_v])`` (``CMF`` has no memory rows). With
    ``fusion_residual`` each side also keeps its input (``v + C_v``).
    ``GAP`` / ``GMP``: one mean- / max-pooled image row prepended to ``E_t``.
    """
    if v.shape[-1] != cfg.d or e_t.shape[-1] != cfg.d:
        raise ShapeError(f"fuse: widths {v.shape[-1]} and {e_t.shape[-1]} != {cfg.d}")
    kind = cfg.fusion_kind
    if kind == "GAP":
        return ad.concat([ad.mean(v, axis=1, keepdims=True), e_t], axis=1)
    if kind == "GMP":
        return ad.concat([ad.max(v, axis=1, keepdims=True), e_t], axis=1)
    if cfg.effective_slots:
        mem_v, mem_t = p["fuse.mem_v"], p["fuse.mem_t"]
    else:
        mem_v = mem_t = _const(np.zeros((0, cfg.d)), cfg)
    att_v = nn.AttentionParams.view(p, "fuse.v", cfg.heads, cfg.scale_mode)
    att_t = nn.AttentionParams.view(p, "fuse.t", cfg.heads, cfg.scale_mode)
    c_v = nn.mca_with_memory(v, e_t, mem_t, att_v, report_valid)
    c_t = nn.mca_with_memory(e_t, v, mem_v, att_t, None)
    if cfg.fusion_residual:
        c_v, c_t = ad.add(v, c_v), ad.add(e_t, c_t)
    return ad.concat([c_v, c_t], axis=1)


def report_offset(cfg: ModelConfig, image_rows: int) -> int:
    """Index of the first report row inside the fused sequence."""
    return 1 if cfg.fusion_kind in ("GAP", "GMP") else image_rows


def decode_report(
    fused: Tensor,
    positions: Sequence[np.ndarray],
    p: Params,
    cfg: ModelConfig,
    image_rows: int,
    report_valid: Optional[np.ndarray] = None,
) -> Tensor:
    """Bidirectional decoder over the fused sequence; logits at masked report positions.

    ``positions[b]`` lists item ``b``'s masked sequence indices (ascending).
    Returns ``(n, V)`` rows in item-major order.
    """
    b, length, d = fused.shape
    off = report_offset(cfg, image_rows)
    if len(positions) != b:
        raise ShapeError(f"{len(positions)} position lists for a batch of {b}")
    for pos in positions:
        if len(pos) and (np.min(pos) < 0 or np.max(pos) + off >= length):
            raise ShapeError("masked report position falls outside the fused sequence")
    key_valid = None
    if report_valid is not None:
        key_valid = np.concatenate([np.ones((b, off), dtype=bool), np.asarray(report_valid, dtype=bool)], axis=1)
    x = _stack(p, "tdec", cfg.depth_dec_t, fused, cfg, key_valid)
    x = ad.layer_norm(x, p["tdec.ln.g"], p["tdec.ln.b"])
    rows = np.concatenate([i * length + off + np.asarray(pos, dtype=np.intp) for i, pos in enumerate(positions)])
    return ad.linear(ad.gather(ad.reshape(x, (b * length, d)), rows), p["tdec.head.w"], p["tdec.head.b"])


# ---------------------------------------------------------------------------
# alignment heads


def project_image_tokens(v: Tensor, p: Params, cfg: ModelConfig) -> Tensor:
    """``W_v . v`` mixing the patch axis into ``M`` rows: ``(B, N_p, D) -> (B, M, D)``."""
    b, n, d = v.shape
    x = ad.reshape(ad.transpose(v, (0, 2, 1)), (b * d, n))
    x = ad.matmul(x, ad.transpose(p["gla.wv"]))
    return ad.transpose(ad.reshape(x, (b, d, cfg.report_len)), (0, 2, 1))


def project_text_tokens(t: Tensor, p: Params) -> Tensor:
    """``t . W_t^T``: ``(B, M, d_t) -> (B, M, D)``."""
    return ad.linear(t, ad.transpose(p["gla.wt"]))


def pool_global(tokens: Tensor, cfg: ModelConfig) -> Tensor:
    pooled = ad.mean(tokens, axis=1)
    return ad.l2_normalize(pooled) if cfg.normalize_global else pooled


def gla_heads(v: Tensor, t: Tensor, p: Params, cfg: ModelConfig) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Returns ``(v_m, t_m, t_m_tokens, alpha)`` for a batch.

    ``v_m`` / ``t_m`` are ``(B, D)`` pooled vectors, ``alpha`` is ``(B, N_p, M)``
    with every column summing to one.
    """
    if v.shape[-1] != cfg.d or t.shape[-1] != cfg.d or v.shape[1] != cfg.n_patches or t.shape[1] != cfg.report_len:
        raise ShapeError(f"gla_heads: unexpected shapes {v.shape}, {t.shape}")
    v_tok = project_image_tokens(v, p, cfg)
    t_tok = project_text_tokens(t, p)
    alpha = obj.similarity_coefficients(v, t_tok, cfg.tau2)
    return pool_global(v_tok, cfg), pool_global(t_tok, cfg), t_tok, alpha


def image_embedding(images, p: Params, cfg: ModelConfig) -> Tensor:
    return pool_global(project_image_tokens(encode_image_full(images, p, cfg), p, cfg), cfg)


def report_embedding(ids, valid, p: Params, cfg: ModelConfig) -> Tensor:
    return pool_global(project_text_tokens(encode_report(ids, p, cfg, valid), p), cfg)


# ---------------------------------------------------------------------------
# full forward


@dataclass
class MaskedBatch:
    """Per-item masks applied to a batch; produced by :func:`mpma.training.mask_batch`."""

    images: np.ndarray
    ids: np.ndarray
    valid: np.ndarray
    image_plans: list
    report_plans: list
    masked_ids: np.ndarray
    targets: np.ndarray  # concatenated, item-major
    positions: list


def forward(p: Params, cfg: ModelConfig, mb: MaskedBatch) -> ForwardOutputs:
    """Run all three branches and evaluate the four loss terms."""
    b = mb.images.shape[0]
    n = cfg.n_patches
    patches = patchify_batch(np.asarray(mb.images), cfg.patch).astype(cfg.dtype)
    h = _check_plans(mb.image_plans, b, n)
    vis_rows = _visible_rows(mb.image_plans, n)
    flat = patches.reshape(b * n, -1)
    visible = _const(flat[vis_rows].reshape(b, n - h, -1), cfg)
    gt = flat[_masked_rows(mb.image_plans, n)]

    enc_u = encode_image_masked(visible, mb.image_plans, p, cfg)
    recon = decode_image(enc_u, mb.image_plans, p, cfg)

    v = _stack(p, "vis.enc", cfg.depth_enc_v, embed_patches(_const(patches, cfg), p, cfg), cfg)

    e_t = embed_report(mb.masked_ids, p, cfg)
    img_side = v if cfg.fusion_source == "full" else enc_u
    fused = fuse(img_side, e_t, p, cfg, mb.valid)
    logits = decode_report(fused, mb.positions, p, cfg, img_side.shape[1], mb.valid)

    t = encode_report(mb.ids, p, cfg, mb.valid)
    v_m, t_m, t_tok, alpha = gla_heads(v, t, p, cfg)

    losses = {
        "l_mim": obj.loss_mim(recon, _const(gt, cfg)),
        "l_mlm": obj.loss_mlm(logits, mb.targets),
        "l_g": obj.loss_global(v_m, t_m, cfg.tau1),
        "l_l": obj.loss_local(v, t_tok, cfg.tau2, cfg.tau3),
    }
    return ForwardOutputs(recon, gt, logits, np.asarray(mb.targets), v, t, v_m, t_m, t_tok, alpha, losses)
