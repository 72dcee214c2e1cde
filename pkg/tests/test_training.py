import json
import math

import numpy as np
import pytest

from mpma import objectives as obj
from mpma.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from mpma.config import RunConfig, load_config, parse_overrides, write_config_file
from mpma.optim import AdamW
from mpma.training import Trainer, TrainingHalted, load_model

from conftest import tiny_run


def test_metrics_stream_is_byte_identical(tiny_corpus, tmp_path):
    for name in ("a", "b"):
        Trainer(tiny_run(tiny_corpus, steps=6, metrics=str(tmp_path / f"{name}.jsonl"))).run()
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    Trainer(tiny_run(tiny_corpus, steps=6, seed=1, metrics=str(tmp_path / "c.jsonl"))).run()
    assert (tmp_path / "a.jsonl").read_bytes() != (tmp_path / "c.jsonl").read_bytes()


def test_records_are_consistent(tiny_corpus, tmp_path):
    tr = Trainer(tiny_run(tiny_corpus, steps=9, metrics=str(tmp_path / "m.jsonl")))
    tr.run()
    recs = [json.loads(line) for line in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == list(range(1, 10))
    for r in recs:
        assert set(r) == {"step", "epoch", "lambda_gla", "l_mim", "l_mlm", "l_g", "l_l", "l_all", "wall_ms"}
        assert r["epoch"] == (r["step"] - 1) // tr.per_epoch
        assert r["lambda_gla"] == obj.warmup_lambda(r["epoch"], 2)
        recomputed = r["l_mim"] + 5.0 * r["l_mlm"] + r["lambda_gla"] * (r["l_g"] + 3.0 * r["l_l"])
        assert abs(recomputed - r["l_all"]) < 1e-6


def test_wall_clock_only_when_requested(tiny_corpus):
    assert Trainer(tiny_run(tiny_corpus, steps=1)).train_step()["wall_ms"] is None
    assert Trainer(tiny_run(tiny_corpus, steps=1, log_wall_ms=True)).train_step()["wall_ms"] >= 0


def test_resume_reproduces_trajectory(tiny_corpus, tmp_path):
    full = Trainer(tiny_run(tiny_corpus, steps=10)).run()
    first = Trainer(tiny_run(tiny_corpus, steps=5, checkpoint=str(tmp_path / "half.bin")))
    first.run()
    second = Trainer(tiny_run(tiny_corpus, steps=10))
    second.resume(tmp_path / "half.bin")
    rest = second.run()
    joined = [r["l_all"] for r in first.state.records] + [r["l_all"] for r in rest]
    np.testing.assert_allclose(joined, [r["l_all"] for r in full], atol=1e-6, rtol=0)


def test_checkpoint_round_trip_is_bit_exact(tiny_corpus, tmp_path):
    tr = Trainer(tiny_run(tiny_corpus, steps=3))
    tr.run()
    tr.save(tmp_path / "ck.bin")
    arrays, cfg, state = load_checkpoint(tmp_path / "ck.bin")
    for k, v in tr.params.items():
        assert arrays[k].dtype == v.dtype and np.array_equal(arrays[k], v)
    for k, v in tr.state.optimizer.state_arrays().items():
        assert np.array_equal(arrays[k], v)
    assert cfg == tr.mcfg.to_dict() and state["step"] == 3
    params, mcfg, _ = load_model(tmp_path / "ck.bin")
    assert set(params) == set(tr.params) and mcfg == tr.mcfg
    tr.save(tmp_path / "ck2.bin")
    assert (tmp_path / "ck.bin").read_bytes() == (tmp_path / "ck2.bin").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.bin")
    save_checkpoint(tmp_path / "ok.bin", {"x": np.arange(3.0)}, {})
    raw = (tmp_path / "ok.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut.bin")


def test_overfit_loss_drops(tiny_corpus):
    # l_all itself rises while lambda_gla warms up, so look at the terms
    recs = Trainer(tiny_run(tiny_corpus, steps=60, lr=3e-3)).run()
    head = {k: np.mean([r[k] for r in recs[:5]]) for k in ("l_mim", "l_mlm")}
    tail = {k: np.mean([r[k] for r in recs[-5:]]) for k in ("l_mim", "l_mlm")}
    assert tail["l_mlm"] < 0.75 * head["l_mlm"]
    assert tail["l_mim"] < head["l_mim"]


def test_nan_halts_with_snapshot(tiny_corpus, tmp_path):
    tr = Trainer(tiny_run(tiny_corpus, steps=3, checkpoint=str(tmp_path / "run.bin")))
    tr.params["vis.patch.w"][0, 0] = np.nan
    with pytest.raises(TrainingHalted) as info:
        tr.run()
    assert info.value.snapshot.exists()
    _, _, state = load_checkpoint(info.value.snapshot)
    assert state["step"] == 0 and "nan" in "".join(state["parts"].values())


def test_seed_is_mandatory(tiny_corpus):
    with pytest.raises(ValueError, match="seed"):
        Trainer(tiny_run(tiny_corpus, seed=-1))


def test_corpus_config_mismatch(tiny_corpus):
    with pytest.raises(ValueError, match="corpus images"):
        Trainer(tiny_run(tiny_corpus, height=32, width=32))
    with pytest.raises(ValueError, match="vocab"):
        Trainer(tiny_run(tiny_corpus, vocab_size=7))


def test_frozen_text_encoder_does_not_move(tiny_corpus):
    tr = Trainer(tiny_run(tiny_corpus, steps=2, freeze_text_encoder=True))
    before = {k: v.copy() for k, v in tr.params.items()}
    tr.run()
    assert all(np.array_equal(before[k], tr.params[k]) for k in before if k.startswith("tenc."))
    assert not np.array_equal(before["vis.patch.w"], tr.params["vis.patch.w"])


# --- optimizer ---------------------------------------------------------------


def test_adamw_first_step_closed_form():
    w = {"w": np.array([[1.0, -2.0]]), "b": np.array([0.5])}
    opt = AdamW(w, lr=0.1, weight_decay=0.05)
    opt.step({"w": np.array([[0.3, -0.1]]), "b": np.array([2.0])})
    # bias-corrected first step moves each entry by lr * sign(g), plus decay on matrices
    np.testing.assert_allclose(w["w"], [[1.0 - 0.1 - 0.1 * 0.05 * 1.0, -2.0 + 0.1 + 0.1 * 0.05 * 2.0]], atol=1e-7)
    np.testing.assert_allclose(w["b"], [0.5 - 0.1], atol=1e-7)


def test_adamw_matches_reference_loop():
    r = np.random.default_rng(0)
    w0 = r.normal(size=(3, 2))
    grads = [r.normal(size=(3, 2)) for _ in range(5)]
    params = {"w": w0.copy()}
    opt = AdamW(params, lr=0.01, betas=(0.9, 0.99), eps=1e-8, weight_decay=0.1)
    w, m, v = w0.copy(), np.zeros_like(w0), np.zeros_like(w0)
    for t, g in enumerate(grads, 1):
        opt.step({"w": g})
        m = 0.9 * m + 0.1 * g
        v = 0.99 * v + 0.01 * g * g
        w = w - 0.01 * ((m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.99**t)) + 1e-8) + 0.1 * w)
    np.testing.assert_allclose(params["w"], w, atol=1e-12)


# --- configuration -------------------------------------------------------------


def test_config_defaults():
    cfg = RunConfig()
    assert (cfg.mask_ratio_image, cfg.mask_ratio_report) == (0.75, 0.5)
    assert (cfg.lambda_il, cfg.lambda_gl) == (5.0, 3.0)
    assert cfg.lr == 2e-4 and cfg.weight_decay == 0.05
    assert (cfg.beta1, cfg.beta2, cfg.adam_eps) == (0.9, 0.999, 1e-8)
    assert cfg.tau1 == cfg.tau2 == cfg.tau3 == 0.1


def test_config_file_round_trip_and_overrides(tmp_path):
    cfg = parse_overrides({"d": "16", "fusion_kind": "GAP", "log_wall_ms": "yes"})
    write_config_file(cfg, tmp_path / "run.cfg")
    again = load_config(tmp_path / "run.cfg", {"lr": "0.01"})
    assert again.d == 16 and again.fusion_kind == "GAP" and again.log_wall_ms is True and again.lr == 0.01


def test_config_rejects_bad_values():
    with pytest.raises(KeyError):
        parse_overrides({"nope": "1"})
    with pytest.raises(ValueError):
        parse_overrides({"d": "wide"})
    with pytest.raises(ValueError):
        parse_overrides({"mask_ratio_image": "1.0"}).validate()
    with pytest.raises(ValueError):
        parse_overrides({"tau2": "0"})
    assert math.isclose(parse_overrides({"tau2": "0.5"}).tau2, 0.5)
