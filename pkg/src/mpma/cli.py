"""``mpma`` command line: gen-corpus, train, gradcheck, reconstruct, probe, ablate-fusion.

Any run-configuration key may be given as ``--key value`` or ``--key=value``;
it overrides the value read from ``--config``.
Exit status: 0 success, 1 usage or input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from . import model as mdl
from . import probe
from .ablation import ablate_fusion
from .checkpoint import CheckpointError
from .config import (RunConfig, field_types, load_config, parse_overrides, read_config_file,
                     write_config_file)
from .corpus import CorpusError, SyntheticWorld, generate_corpus, read_corpus
from .gradcheck import MEMORY_GROUPS, TOLERANCE, run_gradcheck, tiny_config
from .reconstruct import dump, reconstruct
from .training import Trainer, TrainingHalted, load_model

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("mpma")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _overrides(extra: Sequence[str]) -> dict[str, str]:
    """Turn leftover ``--key value`` / ``--key=value`` tokens into config overrides."""
    known = field_types()
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        key, eq, val = tok[2:].partition("=")
        key = key.replace("-", "_")
        if key not in known:
            raise UsageError(f"unknown option --{key}")
        if not eq:
            if known[key] is bool and (i + 1 == len(extra) or extra[i + 1].startswith("--")):
                val = "true"
            else:
                if i + 1 == len(extra):
                    raise UsageError(f"--{key} needs a value")
                i += 1
                val = extra[i]
        out[key] = val
        i += 1
    return out


def _config(args, extra) -> RunConfig:
    pairs = _overrides(extra)
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    try:
        cfg = load_config(args.config, pairs)
        cfg.validate()
    except (KeyError, ValueError, OSError) as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _emit(obj, out: Optional[str]) -> None:
    text = json.dumps(obj, indent=2)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_gen_corpus(args, extra) -> int:
    cfg = _config(args, extra)
    cfg.require_seed()
    if not args.out:
        raise UsageError("gen-corpus needs --out DIR")
    world = SyntheticWorld(seed=cfg.seed, channels=cfg.channels, height=cfg.height, width=cfg.width, noise=args.noise)
    path = generate_corpus(args.n, world, args.out)
    print(f"wrote {args.n} pairs to {path}")
    return EXIT_OK


def cmd_train(args, extra) -> int:
    cfg = _config(args, extra)
    cfg.require_seed()
    if not cfg.corpus:
        raise UsageError("train needs --corpus DIR")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        cfg = dataclasses.replace(cfg, checkpoint=cfg.checkpoint or str(out / "checkpoint.bin"),
                                  metrics=cfg.metrics or str(out / "metrics.jsonl"))
        write_config_file(cfg, out / "config.txt")
    tr = Trainer(cfg)
    if args.resume:
        tr.resume(args.resume)

    def report(rec):
        if rec["step"] % args.log_every == 0 or rec["step"] == tr.total_steps:
            log.info("step %d epoch %d l_all %.4f (mim %.4f mlm %.4f g %.4f l %.4f) lambda_gla %.4f",
                     rec["step"], rec["epoch"], rec["l_all"], rec["l_mim"], rec["l_mlm"], rec["l_g"],
                     rec["l_l"], rec["lambda_gla"])

    try:
        tr.run(on_record=report)
    except TrainingHalted as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    if cfg.checkpoint:
        print(f"checkpoint: {cfg.checkpoint}")
    return EXIT_OK


def cmd_gradcheck(args, extra) -> int:
    try:
        pairs = read_config_file(args.config) if args.config else {}
        pairs.update(_overrides(extra))
        cfg = tiny_config(**dataclasses.asdict(parse_overrides(pairs, base=tiny_config())))
    except (KeyError, ValueError, OSError) as exc:
        raise UsageError(str(exc)) from exc
    seed = args.seed if args.seed is not None else 0

    def show(g):
        tag = "ok" if g.ok else "FAIL"
        mem = "  (memory)" if g.name in MEMORY_GROUPS else ""
        print(f"{g.name:28s} max_rel={g.max_rel:.3e} |grad|={g.grad_norm:.3e} {tag}{mem}")

    results = run_gradcheck(cfg, seed=seed, samples=args.samples, corrupt=args.corrupt, on_group=show)
    worst = max(r.max_rel for r in results)
    failed = [r.name for r in results if not r.ok]
    dead_memory = [r.name for r in results if r.name in MEMORY_GROUPS and r.grad_norm == 0.0]
    print(f"{len(results)} groups, worst relative error {worst:.3e} (tolerance {TOLERANCE:g})")
    if dead_memory:
        print(f"memory groups with zero gradient: {', '.join(dead_memory)}")
    if failed or dead_memory:
        print(f"gradcheck FAILED: {', '.join(failed + dead_memory)}")
        return EXIT_NUMERIC
    print("gradcheck passed")
    return EXIT_OK


def _load(cfg: RunConfig):
    if not cfg.checkpoint:
        raise UsageError("needs --checkpoint PATH")
    if not cfg.corpus:
        raise UsageError("needs --corpus DIR")
    params, mcfg, state = load_model(cfg.checkpoint)
    return params, mcfg, state, read_corpus(cfg.corpus)


def _run_config(state: dict, cfg: RunConfig) -> RunConfig:
    saved = state.get("run_config")
    return RunConfig(**saved) if saved else cfg


def cmd_reconstruct(args, extra) -> int:
    cfg = _config(args, extra)
    params, mcfg, state, corpus = _load(cfg)
    run = _run_config(state, cfg)
    seed = args.seed if args.seed is not None else max(run.seed, 0)
    try:
        results = reconstruct(params, mcfg, run, corpus, args.k, seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = dump(results, args.out or "reconstructions")
    for r in results:
        print(f"sample {r.index}: masked-slot MSE {r.masked_mse:.5f}")
        print(f"  masked: {r.masked_report}")
        print(f"  filled: {r.filled_report}")
    print(f"dumps in {out}")
    return EXIT_OK


def cmd_probe(args, extra) -> int:
    cfg = _config(args, extra)
    params, mcfg, state, corpus = _load(cfg)
    if args.untrained:
        params = mdl.init_params(mcfg, args.init_seed)
    seed = args.seed if args.seed is not None else 0
    if args.task == "classify":
        if not 0.0 < args.label_fraction <= 1.0:
            raise UsageError(f"--label-fraction must lie in (0, 1], got {args.label_fraction}")
        score = probe.classify(params, mcfg, corpus, args.label_fraction, seed=seed)
        result = {"task": "classify", "label_fraction": args.label_fraction, "accuracy": score}
    else:
        score = probe.retrieve(params, mcfg, corpus, seed=seed)
        result = {"task": "retrieve", "recall_at_1": score}
    result["untrained"] = bool(args.untrained)
    _emit(result, args.out)
    return EXIT_OK


def cmd_ablate_fusion(args, extra) -> int:
    cfg = _config(args, extra)
    cfg.require_seed()
    if not cfg.corpus:
        raise UsageError("ablate-fusion needs --corpus DIR")
    corpus = read_corpus(cfg.corpus)
    probe_corpus = read_corpus(args.probe_corpus) if args.probe_corpus else None
    try:
        table = ablate_fusion(cfg, corpus, probe_corpus, args.label_fraction, log=log.info)
    except TrainingHalted as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    _emit(table, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value run configuration file")
    common.add_argument("--seed", type=int, help="base seed (mandatory for training)")
    common.add_argument("--out", metavar="PATH", help="output file or directory")

    ap = _Parser(prog="mpma", description="Masked multimodal pre-training with memory-augmented fusion.")
    ap.add_argument("--version", action="version", version=f"mpma {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-corpus", parents=[common], help="write a synthetic image/report corpus")
    p.add_argument("--n", type=int, required=True, help="number of pairs")
    p.add_argument("--noise", type=float, default=0.03, help="pixel noise std")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", parents=[common], help="pre-train on a corpus")
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from a saved checkpoint")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every parameter group")
    p.add_argument("--samples", type=int, default=6, help="entries checked per parameter array")
    p.add_argument("--corrupt", metavar="PARAM", help="perturb one analytic gradient (negative control)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("reconstruct", parents=[common], help="dump masked/reconstructed/ground-truth triptychs")
    p.add_argument("--k", type=int, default=4, help="number of samples")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("probe", parents=[common], help="linear-probe classification or retrieval")
    p.add_argument("--task", choices=("classify", "retrieve"), default="classify")
    p.add_argument("--label-fraction", type=float, default=1.0)
    p.add_argument("--untrained", action="store_true", help="probe a fresh init of the checkpoint's architecture")
    p.add_argument("--init-seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate-fusion", parents=[common], help="GAP/GMP/CMF/MA_CMF comparison table")
    p.add_argument("--probe-corpus", metavar="DIR", help="held-out corpus for probe scores (default: training corpus)")
    p.add_argument("--label-fraction", type=float, default=1.0)
    p.set_defaults(func=cmd_ablate_fusion)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args, extra = ap.parse_known_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        return args.func(args, extra)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
