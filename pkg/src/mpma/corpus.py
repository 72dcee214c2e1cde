"""Synthetic paired image/report corpus: generation, on-disk format, batching.

Directory layout::

    images.bin     header + count*C*H*W little-endian float32 pixels in [0, 1]
    reports.txt    one report per line, aligned with image index
    vocab.txt      one token per line, line number = id
    manifest.txt   flat key=value description (seed, counts, extents)

The image header is ``b"MPMC"`` followed by six little-endian uint32 values:
version, count, C, H, W and the precision tag (bits per value, 32).
"""

from __future__ import annotations

import queue
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .masking import derive_seed
from .tokenizer import Vocabulary, tokenize

MAGIC = b"MPMC"
VERSION = 1
HEADER = struct.Struct("<4s6I")

GLYPHS = ("rectangle", "disc", "cross", "ring")
SIZES = ("small", "large")
INTENSITIES = ("dim", "bright")
VERTICAL = ("upper", "lower")
HORIZONTAL = ("left", "right")
TEMPLATES = (
    "a {size} {tone} {glyph} in the {v} {h} region",
    "there is a {size} {tone} {glyph} located in the {v} {h} region",
    "the {v} {h} region shows a {size} {tone} {glyph}",
)
SUBWORD_TAIL = ("##s", "##ed", "##ing", "##ly", "##er", "un", "##able", "##ness")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Scene:
    glyph: int
    size: int
    tone: int
    vert: int
    horiz: int
    template: int
    center: tuple
    radius: float
    intensity: float

    def report(self) -> str:
        return TEMPLATES[self.template].format(
            size=SIZES[self.size],
            tone=INTENSITIES[self.tone],
            glyph=GLYPHS[self.glyph],
            v=VERTICAL[self.vert],
            h=HORIZONTAL[self.horiz],
        )


@dataclass
class SyntheticWorld:
    """Single-glyph scenes whose report is a deterministic function of the scene."""

    seed: int = 0
    channels: int = 1
    height: int = 32
    width: int = 32
    noise: float = 0.03

    def vocabulary(self) -> Vocabulary:
        words = set()
        for t in TEMPLATES:
            words.update(w for w in t.split() if not w.startswith("{"))
        for group in (GLYPHS, SIZES, INTENSITIES, VERTICAL, HORIZONTAL):
            words.update(group)
        return Vocabulary.build(words, SUBWORD_TAIL)

    def sample_scene(self, rng: np.random.Generator) -> Scene:
        glyph, size, tone, vert, horiz = (int(rng.integers(k)) for k in (4, 2, 2, 2, 2))
        template = int(rng.integers(len(TEMPLATES)))
        short = min(self.height, self.width)
        radius = short * (0.14 if size == 0 else 0.23) * rng.uniform(0.9, 1.1)
        # keep the glyph inside its quadrant
        margin = radius + 1
        cy = rng.uniform(margin, self.height / 2 - 1) if vert == 0 else rng.uniform(self.height / 2 + 1, self.height - margin)
        cx = rng.uniform(margin, self.width / 2 - 1) if horiz == 0 else rng.uniform(self.width / 2 + 1, self.width - margin)
        intensity = rng.uniform(0.45, 0.6) if tone == 0 else rng.uniform(0.85, 1.0)
        return Scene(glyph, size, tone, vert, horiz, template, (cy, cx), radius, intensity)

    def render(self, scene: Scene, rng: np.random.Generator) -> np.ndarray:
        yy, xx = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64) + 0.5
        dy, dx = yy - scene.center[0], xx - scene.center[1]
        s = scene.radius
        r = np.hypot(dy, dx)
        if scene.glyph == 0:
            mask = (np.abs(dx) <= s) & (np.abs(dy) <= 0.6 * s)
        elif scene.glyph == 1:
            mask = r <= s
        elif scene.glyph == 2:
            arm = max(s / 4, 1.0)
            mask = ((np.abs(dx) <= s) & (np.abs(dy) <= arm)) | ((np.abs(dy) <= s) & (np.abs(dx) <= arm))
        else:
            mask = (r <= s) & (r >= 0.55 * s)
        img = mask * scene.intensity + rng.normal(0.0, self.noise, mask.shape)
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        return np.repeat(img[None], self.channels, axis=0)

    def sample(self, index: int) -> tuple[np.ndarray, str, Scene]:
        rng = np.random.Generator(np.random.PCG64(derive_seed(self.seed, index)))
        scene = self.sample_scene(rng)
        return self.render(scene, rng), scene.report(), scene


def glyph_label(report: str) -> int:
    """Glyph class encoded in a report; -1 if none is mentioned."""
    words = report.split()
    for k, g in enumerate(GLYPHS):
        if g in words:
            return k
    return -1


def _write_manifest(path: Path, items: dict) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in items.items()), encoding="utf-8")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def generate_corpus(n: int, world: SyntheticWorld, out_dir) -> Path:
    if n < 1:
        raise CorpusError("corpus size must be at least 1")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CorpusError(f"cannot create corpus directory {out}: {exc}") from exc
    images = np.empty((n, world.channels, world.height, world.width), dtype="<f4")
    reports = []
    for i in range(n):
        img, rep, _ = world.sample(i)
        images[i] = img
        reports.append(rep)
    with open(out / "images.bin", "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, n, world.channels, world.height, world.width, 32))
        fh.write(images.tobytes(order="C"))
    (out / "reports.txt").write_text("\n".join(reports) + "\n", encoding="utf-8")
    world.vocabulary().save(out / "vocab.txt")
    _write_manifest(
        out / "manifest.txt",
        {
            "format": "mpma-corpus",
            "version": VERSION,
            "seed": world.seed,
            "count": n,
            "channels": world.channels,
            "height": world.height,
            "width": world.width,
            "noise": world.noise,
        },
    )
    return out


@dataclass
class Corpus:
    images: np.ndarray  # (n, C, H, W) float32
    reports: list
    vocab: Vocabulary
    manifest: dict = field(default_factory=dict)
    path: Optional[Path] = None

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def labels(self) -> np.ndarray:
        return np.array([glyph_label(r) for r in self.reports], dtype=np.int64)

    def tokenized(self, length: int) -> tuple[np.ndarray, np.ndarray]:
        reps = [tokenize(r, self.vocab, length) for r in self.reports]
        return np.stack([r.ids for r in reps]), np.stack([r.valid for r in reps])


def read_corpus(path) -> Corpus:
    root = Path(path)
    img_path = root / "images.bin"
    try:
        raw = img_path.read_bytes()
    except OSError as exc:
        raise CorpusError(f"{img_path}: cannot read ({exc})") from exc
    if len(raw) < HEADER.size:
        raise CorpusError(f"{img_path}: truncated header")
    magic, version, count, c, h, w, prec = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CorpusError(f"{img_path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CorpusError(f"{img_path}: unsupported version {version}")
    if prec != 32:
        raise CorpusError(f"{img_path}: unsupported precision tag {prec}")
    expected = HEADER.size + count * c * h * w * 4
    if len(raw) != expected:
        raise CorpusError(f"{img_path}: expected {expected} bytes, found {len(raw)} (truncated or padded file)")
    images = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(count, c, h, w).astype(np.float32)
    rep_path = root / "reports.txt"
    reports = rep_path.read_text(encoding="utf-8").splitlines()
    if len(reports) != count:
        raise CorpusError(f"{rep_path}: {len(reports)} reports for {count} images")
    vocab = Vocabulary.load(root / "vocab.txt")
    manifest = read_manifest(root / "manifest.txt") if (root / "manifest.txt").exists() else {}
    return Corpus(np.clip(images, 0.0, 1.0), reports, vocab, manifest, root)


@dataclass
class PairedBatch:
    indices: np.ndarray
    images: np.ndarray  # (B, C, H, W)
    reports: list
    ids: np.ndarray  # (B, M)
    valid: np.ndarray  # (B, M) bool

    def __len__(self) -> int:
        return len(self.indices)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, epoch, 0xC0))).permutation(n)


def batches_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def make_batch(corpus: Corpus, idx: np.ndarray, length: int) -> PairedBatch:
    reps = [tokenize(corpus.reports[i], corpus.vocab, length) for i in idx]
    return PairedBatch(
        indices=np.asarray(idx),
        images=corpus.images[idx],
        reports=[corpus.reports[i] for i in idx],
        ids=np.stack([r.ids for r in reps]),
        valid=np.stack([r.valid for r in reps]),
    )


def iter_batches(corpus: Corpus, batch_size: int, length: int, seed: int, epoch: int, skip: int = 0) -> Iterator[PairedBatch]:
    order = epoch_order(len(corpus), seed, epoch)
    for b in range(skip, batches_per_epoch(len(corpus), batch_size)):
        yield make_batch(corpus, order[b * batch_size : (b + 1) * batch_size], length)


def load_corpus(
    path,
    batch_size: int,
    length: int,
    seed: int,
    epoch: int = 0,
    prefetch: int = 2,
) -> Iterator[PairedBatch]:
    """Stream one epoch of shuffled batches, tokenized in a background producer.

    The last batch may be short. ``prefetch`` bounds the read-ahead queue.
    """
    corpus = read_corpus(path)
    if prefetch <= 0:
        yield from iter_batches(corpus, batch_size, length, seed, epoch)
        return
    handoff: queue.Queue = queue.Queue(maxsize=prefetch)
    done = object()
    stop = threading.Event()

    def produce():
        try:
            for batch in iter_batches(corpus, batch_size, length, seed, epoch):
                while not stop.is_set():
                    try:
                        handoff.put(batch, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        except BaseException as exc:  # surfaced to the consumer
            handoff.put(exc)
            return
        handoff.put(done)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        while True:
            item = handoff.get()
            if item is done:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        worker.join(timeout=1.0)
