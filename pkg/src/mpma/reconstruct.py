"""Masked-input / reconstruction / ground-truth dumps for a trained checkpoint."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as mdl
from .config import RunConfig
from .corpus import Corpus
from .masking import merge_patches, patchify_batch, unpatchify
from .tokenizer import detokenize
from .training import mask_batch


@dataclass
class Reconstruction:
    index: int
    masked_input: np.ndarray  # (C, H, W), masked slots zeroed
    reconstruction: np.ndarray  # visible slots are ground truth, masked slots are model output
    ground_truth: np.ndarray
    masked_mse: float
    masked_report: str
    filled_report: str
    true_report: str


def reconstruct(params, mcfg: mdl.ModelConfig, run: RunConfig, corpus: Corpus, k: int, seed: int) -> list[Reconstruction]:
    """Mask the first ``k`` corpus pairs with ``seed`` and fill them in with the model."""
    if not 1 <= k <= len(corpus):
        raise ValueError(f"k={k} must lie in [1, {len(corpus)}] (corpus size)")
    idx = np.arange(k)
    ids, valid = corpus.tokenized(mcfg.report_len)
    images = corpus.images[idx].astype(mcfg.dtype)
    mb = mask_batch(images, ids[idx], valid[idx], run, seed, 0, mcfg)
    out = mdl.forward(mdl.as_constants(params), mcfg, mb)
    recon = out.recon_patches.data
    predicted = out.mlm_logits.data.argmax(axis=1)

    patches = patchify_batch(images, mcfg.patch)
    shape = (mcfg.channels, mcfg.height, mcfg.width)
    results, r0, t0 = [], 0, 0
    for i in range(k):
        plan = mb.image_plans[i]
        h = len(plan.masked)
        pred = recon[r0 : r0 + h]
        r0 += h
        vis = patches[i][plan.visible]
        gt_masked = patches[i][plan.masked]
        filled_ids = mb.masked_ids[i].copy()
        pos = mb.positions[i]
        filled_ids[pos] = predicted[t0 : t0 + len(pos)]
        t0 += len(pos)
        results.append(Reconstruction(
            index=int(idx[i]),
            masked_input=unpatchify(merge_patches(vis, np.zeros_like(gt_masked), plan), *shape, mcfg.patch),
            reconstruction=unpatchify(merge_patches(vis, pred, plan), *shape, mcfg.patch),
            ground_truth=images[i],
            masked_mse=float(np.mean((pred - gt_masked) ** 2)),
            masked_report=detokenize(mb.masked_ids[i], corpus.vocab),
            filled_report=detokenize(filled_ids, corpus.vocab),
            true_report=corpus.reports[idx[i]],
        ))
    return results


def write_pnm(path, image: np.ndarray) -> None:
    """8-bit binary PGM (one channel) or PPM (three channels) from a ``(C, H, W)`` array in [0, 1]."""
    c, h, w = image.shape
    if c not in (1, 3):
        raise ValueError(f"cannot write {c}-channel image as PNM")
    px = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    body = px[0] if c == 1 else px.transpose(1, 2, 0)
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + body.tobytes())


def dump(results: list[Reconstruction], out_dir) -> Path:
    """Write per-sample ``.npy`` arrays, PNM triptychs and a JSON summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for r in results:
        stem = f"sample{r.index:04d}"
        for tag, arr in (("input", r.masked_input), ("recon", r.reconstruction), ("gt", r.ground_truth)):
            np.save(out / f"{stem}_{tag}.npy", arr)
            write_pnm(out / f"{stem}_{tag}.pgm" if arr.shape[0] == 1 else out / f"{stem}_{tag}.ppm", arr)
        c, h, _ = r.ground_truth.shape
        gap = np.ones((c, h, 2))
        strip = np.concatenate([r.masked_input, gap, r.reconstruction, gap, r.ground_truth], axis=2)
        write_pnm(out / (f"{stem}_triptych.pgm" if c == 1 else f"{stem}_triptych.ppm"), strip)
        summary.append({"index": r.index, "masked_mse": r.masked_mse, "masked_report": r.masked_report,
                        "filled_report": r.filled_report, "true_report": r.true_report})
    (out / "reports.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return out
