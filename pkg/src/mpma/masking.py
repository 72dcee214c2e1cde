"""Patchify images, sample mask plans, and apply them to patches and token ids.

Random sampling uses numpy's ``PCG64`` bit generator (``numpy.random.Generator``,
numpy >= 1.17 stream) seeded with a 64-bit integer. A plan is the sorted
first ``h`` entries of ``Generator(PCG64(seed)).permutation(total)``, so a
``(total, ratio, seed)`` triple always yields the same plan.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PAD_ID = 0
CLS_ID = 1
MASK_ID = 2
UNK_ID = 3


class MaskingError(ValueError):
    pass


@dataclass(frozen=True)
class MaskPlan:
    total: int
    masked: np.ndarray
    visible: np.ndarray
    ratio: float
    seed: int

    @property
    def n_masked(self) -> int:
        return int(self.masked.size)

    @property
    def n_visible(self) -> int:
        return int(self.visible.size)


@dataclass(frozen=True)
class PatchGrid:
    channels: int
    height: int
    width: int
    patch: int
    patches: np.ndarray  # (N_p, P*P*C)

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]


@dataclass
class TokenizedReport:
    ids: np.ndarray
    valid: np.ndarray  # False at [PAD] positions
    pad_token_id: int = PAD_ID
    cls_token_id: int = CLS_ID
    mask_token_id: int = MASK_ID
    tokens: list = field(default_factory=list)

    def maskable_positions(self, mask_cls: bool = False) -> np.ndarray:
        pos = np.flatnonzero(self.valid)
        if not mask_cls:
            pos = pos[self.ids[pos] != self.cls_token_id]
        return pos


def mask_count(total: int, ratio: float) -> int:
    """``round(ratio * total)`` clamped so both sides stay non-empty."""
    return int(min(max(round(ratio * total), 1), total - 1))


def make_mask_plan(total: int, ratio: float, seed: int) -> MaskPlan:
    if total < 2:
        raise MaskingError(f"need at least 2 positions to mask, got {total}")
    if not 0.0 < ratio < 1.0:
        raise MaskingError(f"mask ratio must lie in (0, 1), got {ratio}")
    h = mask_count(total, ratio)
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(total)
    masked = np.sort(perm[:h])
    visible = np.sort(perm[h:])
    return MaskPlan(total, masked, visible, float(ratio), int(seed))


def derive_seed(*keys: int) -> int:
    """Stable 64-bit seed from a tuple of non-negative integers (e.g. base seed, step, item)."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


def patchify(image: np.ndarray, patch: int) -> PatchGrid:
    """Split a ``(C, H, W)`` image into row-major ``P x P`` blocks.

    Each row is the block flattened in ``(P, P, C)`` order.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise MaskingError(f"image must be (C, H, W), got shape {image.shape}")
    c, h, w = image.shape
    if patch < 1 or h % patch or w % patch:
        raise MaskingError(f"image extents {h}x{w} are not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = image.reshape(c, gh, patch, gw, patch).transpose(1, 3, 2, 4, 0)
    return PatchGrid(c, h, w, patch, x.reshape(gh * gw, patch * patch * c))


def patchify_batch(images: np.ndarray, patch: int) -> np.ndarray:
    """``(B, C, H, W) -> (B, N_p, P*P*C)`` using the same layout as :func:`patchify`."""
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise MaskingError(f"image extents {h}x{w} are not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(b, gh * gw, patch * patch * c)


def unpatchify(patches: np.ndarray, channels: int, height: int, width: int, patch: int) -> np.ndarray:
    gh, gw = height // patch, width // patch
    x = np.asarray(patches).reshape(gh, gw, patch, patch, channels).transpose(4, 0, 2, 1, 3)
    return x.reshape(channels, height, width)


def apply_image_mask(grid: PatchGrid, plan: MaskPlan) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(visible_rows, masked_rows)``, both in ascending patch index order."""
    if plan.total != grid.n_patches:
        raise MaskingError(f"plan covers {plan.total} patches but the grid has {grid.n_patches}")
    return grid.patches[plan.visible], grid.patches[plan.masked]


def merge_patches(visible: np.ndarray, masked: np.ndarray, plan: MaskPlan) -> np.ndarray:
    out = np.empty((plan.total,) + visible.shape[1:], dtype=np.result_type(visible, masked))
    out[plan.visible] = visible
    out[plan.masked] = masked
    return out


def apply_report_mask(
    rep: TokenizedReport, plan: MaskPlan, mask_cls: bool = False
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Substitute ``[MASK]`` at the planned positions.

    ``plan`` indexes the report's maskable positions (non-pad, and non-[CLS]
    unless ``mask_cls``). Returns ``(masked_ids, targets, positions)`` where
    ``positions`` are the sequence indices that were replaced, ascending.
    """
    pool = rep.maskable_positions(mask_cls)
    if plan.total != pool.size:
        raise MaskingError(
            f"plan covers {plan.total} positions but the report has {pool.size} maskable (non-pad) tokens"
        )
    positions = pool[plan.masked]
    out = rep.ids.copy()
    targets = rep.ids[positions].copy()
    out[positions] = rep.mask_token_id
    return out, targets, positions


def unmask_report(masked_ids: np.ndarray, targets: Sequence[int], positions: Sequence[int]) -> np.ndarray:
    out = np.asarray(masked_ids).copy()
    out[np.asarray(positions, dtype=np.intp)] = np.asarray(targets)
    return out
