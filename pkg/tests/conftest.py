import numpy as np
import pytest

from dglab.model import EncoderSpec, FusionSpec, MultimodalModel


def assert_grad_close(actual, expected, abs_tol=1e-6, rel_tol=1e-4):
    """Elementwise |a - e| <= max(abs_tol, rel_tol * |e|)."""
    actual, expected = np.asarray(actual), np.asarray(expected)
    assert actual.shape == expected.shape
    bound = np.maximum(abs_tol, rel_tol * np.abs(expected))
    worst = np.max(np.abs(actual - expected) - bound, initial=-np.inf)
    assert worst <= 0, f"gradient mismatch beyond tolerance by {worst:.3g}"


def small_model(fusion="concat", M=2, dims=(5, 4, 3), hidden=(6,), rep=3, K=4, seed=0):
    specs = [EncoderSpec(dims[k], hidden, rep + k) for k in range(M)]
    fspec = FusionSpec("mlp", 7) if fusion == "mlp" else FusionSpec("concat")
    return MultimodalModel.build(specs, fspec, K, rng=seed)


def small_batch(model, n=5, seed=1):
    rng = np.random.default_rng(seed)
    xs = [rng.standard_normal((n, s.input_dim)) for s in model.encoder_specs]
    y = rng.integers(0, model.n_classes, size=n)
    return xs, y


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
