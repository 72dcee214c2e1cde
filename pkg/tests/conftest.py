import numpy as np
import pytest

from mpma import autodiff as ad


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def taped_grads(build, inputs: dict) -> tuple[float, dict]:
    """Evaluate ``build(tensors) -> scalar Tensor`` on a tape and return value and grads."""
    with ad.Tape() as tape:
        ts = {k: tape.watch(k, v) for k, v in inputs.items()}
        out = build(ts)
    return float(out.data), ad.backward(out, tape)


def assert_fd_match(build, inputs: dict, tol: float = 1e-4, h: float = 1e-6) -> None:
    """Compare taped gradients against central differences for every input."""
    inputs = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    _, grads = taped_grads(build, inputs)
    for name, x in inputs.items():
        def f(val, name=name):
            args = dict(inputs)
            args[name] = val
            return float(build({k: ad.Tensor(v) for k, v in args.items()}).data)

        fd = numeric_grad(f, x, h)
        rel = np.abs(grads[name] - fd) / (np.abs(fd) + 1e-8)
        # entries whose true gradient is ~0 are compared absolutely
        rel = np.where(np.abs(fd) < 1e-7, np.abs(grads[name] - fd), rel)
        assert rel.max() < tol, f"{name}: max relative error {rel.max():.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    from mpma.corpus import SyntheticWorld, generate_corpus

    return generate_corpus(12, SyntheticWorld(seed=1, height=16, width=16), tmp_path_factory.mktemp("corpus") / "c12")


def tiny_run(corpus, **kw):
    from mpma.config import RunConfig

    base = dict(d=16, heads=2, patch=8, height=16, width=16, mem_slots=4, mlp_ratio=2, batch_size=4,
                seed=0, corpus=str(corpus), lr=1e-3, warmup_epochs=2)
    base.update(kw)
    return RunConfig(**base)


# criterion number -> "PASS|FAIL ..." line, filled in by test_acceptance
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
