import numpy as np
import pytest


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f()
        x[i] = old - eps
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b):
    """max |a - b| scaled by the larger of the two max magnitudes."""
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


def window_sum_score(frames, k=20):
    """Mean over bins of the largest k x k window event count (both channels)."""
    f = frames.sum(axis=1).astype(np.int64)  # [T, H, W]
    c = np.zeros((f.shape[0], f.shape[1] + 1, f.shape[2] + 1), dtype=np.int64)
    c[:, 1:, 1:] = f.cumsum(1).cumsum(2)
    win = c[:, k:, k:] - c[:, :-k, k:] - c[:, k:, :-k] + c[:, :-k, :-k]
    return win.reshape(win.shape[0], -1).max(axis=1).mean()


def window_sum_oracle_accuracy(split, k=20):
    """Test accuracy (%) of thresholding the window score midway between the train class means."""
    from snnsweep.events import encode_frames
    score = lambda s: window_sum_score(encode_frames(s), k)  # noqa: E731
    train = [(score(s), s.label) for s in split.train]
    m0 = np.mean([v for v, lab in train if lab == 0])
    m1 = np.mean([v for v, lab in train if lab == 1])
    thr = (m0 + m1) / 2
    pred = [0 if (score(s) > thr) == (m0 > m1) else 1 for s in split.test]
    return 100.0 * float(np.mean([p == s.label for p, s in zip(pred, split.test)]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_split():
    """Desk-scale synthetic split: 200 train / 100 test samples per class."""
    from snnsweep.events import generate_synthetic
    return generate_synthetic(200, seed=0, n_test_per_class=100)


@pytest.fixture(autouse=True)
def _output_root(tmp_path, monkeypatch):
    """Keep default CLI output directories out of the working tree."""
    monkeypatch.setenv("SNN_OUTPUT_ROOT", str(tmp_path / "runs"))
