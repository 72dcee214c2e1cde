"""Pre-training loop: mask, forward all branches, weighted loss, AdamW step."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import model as mdl
from . import objectives as obj
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .corpus import Corpus, batches_per_epoch, epoch_order, read_corpus
from .masking import TokenizedReport, apply_report_mask, derive_seed, make_mask_plan
from .optim import AdamW

log = logging.getLogger(__name__)

IMAGE_STREAM, REPORT_STREAM = 1, 2


class TrainingHalted(RuntimeError):
    """Training stopped on a non-finite loss; ``snapshot`` names the diagnostic dump."""

    def __init__(self, message: str, snapshot: Optional[Path] = None):
        super().__init__(message)
        self.snapshot = snapshot


def mask_batch(images, ids, valid, cfg: RunConfig, seed: int, step: int, mcfg: mdl.ModelConfig) -> mdl.MaskedBatch:
    """Per-item image and report plans from seeds derived from ``(seed, step, item)``."""
    b = len(ids)
    image_plans, report_plans, masked, targets, positions = [], [], [], [], []
    for i in range(b):
        image_plans.append(make_mask_plan(mcfg.n_patches, cfg.mask_ratio_image, derive_seed(seed, step, i, IMAGE_STREAM)))
        rep = TokenizedReport(ids=np.asarray(ids[i]), valid=np.asarray(valid[i], dtype=bool))
        pool = rep.maskable_positions(mcfg.mask_cls).size
        plan = make_mask_plan(pool, cfg.mask_ratio_report, derive_seed(seed, step, i, REPORT_STREAM))
        report_plans.append(plan)
        m_ids, tgt, pos = apply_report_mask(rep, plan, mcfg.mask_cls)
        masked.append(m_ids)
        targets.append(tgt)
        positions.append(pos)
    return mdl.MaskedBatch(
        images=np.asarray(images),
        ids=np.asarray(ids),
        valid=np.asarray(valid, dtype=bool),
        image_plans=image_plans,
        report_plans=report_plans,
        masked_ids=np.stack(masked),
        targets=np.concatenate(targets),
        positions=positions,
    )


def loss_and_grads(params: dict, mcfg: mdl.ModelConfig, mb: mdl.MaskedBatch, sched: obj.TrainSchedule,
                   frozen=frozenset()):
    """One taped forward/backward; returns ``(LossBreakdown, grads, outputs)``."""
    with ad.Tape() as tape:
        p = {k: (ad.Tensor(v) if k in frozen else tape.watch(k, v)) for k, v in params.items()}
        out = mdl.forward(p, mcfg, mb)
        total, parts = obj.loss_all(out.losses["l_mim"], out.losses["l_mlm"], out.losses["l_g"],
                                    out.losses["l_l"], sched)
    grads = ad.backward(total, tape)
    return parts, grads, out


@dataclass
class TrainState:
    params: dict
    optimizer: AdamW
    step: int = 0
    records: list = field(default_factory=list)


class Trainer:
    def __init__(self, cfg: RunConfig, corpus: Optional[Corpus] = None):
        cfg.require_seed()
        self.cfg = cfg
        self.corpus = corpus if corpus is not None else read_corpus(cfg.corpus)
        vocab = len(self.corpus.vocab)
        if cfg.vocab_size and cfg.vocab_size != vocab:
            raise ValueError(f"config vocab_size={cfg.vocab_size} but corpus vocabulary has {vocab} tokens")
        self.mcfg = cfg.model_config(vocab_size=vocab)
        shape = self.corpus.images.shape[1:]
        if shape != (self.mcfg.channels, self.mcfg.height, self.mcfg.width):
            raise ValueError(f"corpus images are {shape}, config expects "
                             f"{(self.mcfg.channels, self.mcfg.height, self.mcfg.width)}")
        self.ids, self.valid = self.corpus.tokenized(self.mcfg.report_len)
        self.images = self.corpus.images.astype(self.mcfg.dtype)
        self.per_epoch = batches_per_epoch(len(self.corpus), cfg.batch_size)
        self.total_steps = cfg.steps if cfg.steps > 0 else cfg.epochs * self.per_epoch
        params = mdl.init_params(self.mcfg, cfg.seed)
        self.frozen = mdl.frozen_names(self.mcfg, params)
        opt = AdamW(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
                    weight_decay=cfg.weight_decay, frozen=self.frozen)
        self.state = TrainState(params, opt)

    @property
    def params(self) -> dict:
        return self.state.params

    def schedule(self, step: int) -> obj.TrainSchedule:
        return obj.TrainSchedule(step=step, epoch=step // self.per_epoch, warmup_epochs=self.cfg.warmup_epochs,
                                 lambda_il=self.cfg.lambda_il, lambda_gl=self.cfg.lambda_gl)

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, k = divmod(step, self.per_epoch)
        order = epoch_order(len(self.corpus), self.cfg.seed, epoch)
        bs = self.cfg.batch_size
        return order[k * bs : (k + 1) * bs]

    def masked_batch(self, step: int) -> mdl.MaskedBatch:
        idx = self.batch_indices(step)
        return mask_batch(self.images[idx], self.ids[idx], self.valid[idx], self.cfg, self.cfg.seed, step, self.mcfg)

    def train_step(self) -> dict:
        step = self.state.step
        sched = self.schedule(step)
        t0 = time.perf_counter()
        mb = self.masked_batch(step)
        try:
            parts, grads, _ = loss_and_grads(self.params, self.mcfg, mb, sched, self.frozen)
        except obj.NonFiniteLoss as exc:
            snap = self._dump_diagnostic(step, exc.parts)
            raise TrainingHalted(f"step {step + 1}: {exc}; diagnostic snapshot at {snap}", snap) from exc
        self.state.optimizer.step(grads)
        self.state.step += 1
        rec = {
            "step": self.state.step,
            "epoch": sched.epoch,
            "lambda_gla": parts.lambda_gla,
            "l_mim": parts.l_mim,
            "l_mlm": parts.l_mlm,
            "l_g": parts.l_g,
            "l_l": parts.l_l,
            "l_all": parts.l_all,
            "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3) if self.cfg.log_wall_ms else None,
        }
        self.state.records.append(rec)
        return rec

    def run(self, steps: Optional[int] = None, on_record: Optional[Callable[[dict], None]] = None) -> list:
        """Train until ``steps`` total optimizer steps (default: the configured budget)."""
        target = self.total_steps if steps is None else steps
        metrics = open(self.cfg.metrics, "a", encoding="utf-8") if self.cfg.metrics else None
        try:
            while self.state.step < target:
                rec = self.train_step()
                if metrics:
                    metrics.write(json.dumps(rec) + "\n")
                    metrics.flush()
                if on_record:
                    on_record(rec)
                every = self.cfg.checkpoint_every
                if every and self.cfg.checkpoint and self.state.step % every == 0:
                    self.save(self.cfg.checkpoint)
        finally:
            if metrics:
                metrics.close()
        if self.cfg.checkpoint:
            self.save(self.cfg.checkpoint)
        return self.state.records

    def save(self, path) -> None:
        arrays = dict(self.params)
        arrays.update(self.state.optimizer.state_arrays())
        state = {"step": self.state.step, "opt_t": self.state.optimizer.t,
                 "run_config": dataclasses.asdict(self.cfg)}
        save_checkpoint(path, arrays, self.mcfg.to_dict(), state)

    def resume(self, path) -> None:
        arrays, cfg, state = load_checkpoint(path)
        if cfg != self.mcfg.to_dict():
            raise ValueError("checkpoint model configuration differs from the run configuration")
        for k, v in self.params.items():
            v[...] = arrays[k]
        self.state.optimizer.load_state_arrays(arrays, int(state["opt_t"]))
        self.state.step = int(state["step"])

    def _dump_diagnostic(self, step: int, parts: dict) -> Path:
        base = Path(self.cfg.checkpoint or self.cfg.metrics or "mpma-run")
        snap = base.with_name(base.name + f".nonfinite-step{step + 1}")
        save_checkpoint(snap, self.params, self.mcfg.to_dict(),
                        {"step": step, "parts": {k: repr(v) for k, v in parts.items()}})
        return snap


def load_model(path) -> tuple[dict, mdl.ModelConfig, dict]:
    """Parameters (optimizer moments dropped), model config and saved state."""
    arrays, cfg, state = load_checkpoint(path)
    mcfg = mdl.ModelConfig.from_dict(cfg)
    names = mdl.param_specs(mcfg)
    return {k: arrays[k] for k in names}, mcfg, state
