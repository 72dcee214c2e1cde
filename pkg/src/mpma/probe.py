"""Frozen-encoder downstream probes: glyph classification and report retrieval."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .corpus import Corpus
from .masking import derive_seed
from .optim import AdamW


def image_features(params: Mapping[str, np.ndarray], cfg: mdl.ModelConfig, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Mean-pooled shared-encoder tokens, ``(n, d)``."""
    p = mdl.as_constants(params)
    out = []
    for i in range(0, len(images), chunk):
        v = mdl.encode_image_full(images[i : i + chunk].astype(cfg.dtype), p, cfg)
        out.append(v.data.mean(axis=1))
    return np.concatenate(out).astype(np.float64)


def split_indices(n: int, seed: int, test_fraction: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.Generator(np.random.PCG64(derive_seed(seed, 0x5B))).permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def labeled_subset(train_idx: np.ndarray, labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Class-stratified sample of ``fraction`` of the training split, at least one per class."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"label fraction must lie in (0, 1], got {fraction}")
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, 0x1AB)))
    picked = []
    for c in np.unique(labels[train_idx]):
        members = train_idx[labels[train_idx] == c]
        k = max(1, int(round(fraction * members.size)))
        picked.append(rng.choice(members, size=k, replace=False))
    return np.sort(np.concatenate(picked))


@dataclass
class LinearProbe:
    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def predict(self, feats: np.ndarray) -> np.ndarray:
        z = (feats - self.mean) / self.scale
        return np.argmax(z @ self.weight + self.bias, axis=1)


def fit_linear_probe(feats: np.ndarray, labels: np.ndarray, n_classes: int, steps: int = 300,
                     lr: float = 0.05, weight_decay: float = 1e-3) -> LinearProbe:
    """Softmax regression on standardized features, full-batch AdamW."""
    mean = feats.mean(axis=0)
    scale = feats.std(axis=0) + 1e-8
    x = ad.Tensor((feats - mean) / scale)
    params = {"w": np.zeros((feats.shape[1], n_classes)), "b": np.zeros(n_classes)}
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    onehot = np.eye(n_classes)[labels]
    for _ in range(steps):
        with ad.Tape() as tape:
            w, b = tape.watch("w", params["w"]), tape.watch("b", params["b"])
            logp = ad.log_softmax(ad.add(ad.matmul(x, w), b), axis=1)
            loss = ad.neg(ad.mean(ad.sum(ad.mul(logp, ad.Tensor(onehot)), axis=1)))
        opt.step(ad.backward(loss, tape))
    return LinearProbe(params["w"], params["b"], mean, scale)


def classify(params, cfg: mdl.ModelConfig, corpus: Corpus, label_fraction: float, seed: int = 0,
             feats: Optional[np.ndarray] = None) -> float:
    """Held-out glyph accuracy of a linear probe trained on ``label_fraction`` of the training split."""
    labels = corpus.labels
    if (labels < 0).any():
        raise ValueError("some reports name no glyph class")
    if feats is None:
        feats = image_features(params, cfg, corpus.images)
    train_idx, test_idx = split_indices(len(corpus), seed)
    sub = labeled_subset(train_idx, labels, label_fraction, seed)
    n_classes = int(labels.max()) + 1
    probe = fit_linear_probe(feats[sub], labels[sub], n_classes)
    return float(np.mean(probe.predict(feats[test_idx]) == labels[test_idx]))


def recall_at_1(img_emb: np.ndarray, txt_emb: np.ndarray) -> float:
    """Fraction of images whose highest-scoring report is their own (ties go to the lowest index)."""
    sim = img_emb @ txt_emb.T
    return float(np.mean(np.argmax(sim, axis=1) == np.arange(len(sim))))


def embeddings(params, cfg: mdl.ModelConfig, corpus: Corpus, idx: np.ndarray, chunk: int = 64):
    p = mdl.as_constants(params)
    ids, valid = corpus.tokenized(cfg.report_len)
    img, txt = [], []
    for i in range(0, len(idx), chunk):
        sl = idx[i : i + chunk]
        img.append(mdl.image_embedding(corpus.images[sl].astype(cfg.dtype), p, cfg).data)
        txt.append(mdl.report_embedding(ids[sl], valid[sl], p, cfg).data)
    return np.concatenate(img), np.concatenate(txt)


def retrieve(params, cfg: mdl.ModelConfig, corpus: Corpus, seed: int = 0) -> float:
    """Image-to-report recall@1 over the held-out split using pooled alignment embeddings."""
    _, test_idx = split_indices(len(corpus), seed)
    img, txt = embeddings(params, cfg, corpus, test_idx)
    return recall_at_1(img, txt)
