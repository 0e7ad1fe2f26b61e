"""Independent oracles shared by the test modules."""

import math

import numpy as np


def central_difference(f, arr: np.ndarray, h: float = 1e-3, index=None) -> np.ndarray:
    """Numerical gradient of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    indices = np.ndindex(arr.shape) if index is None else index
    for i in indices:
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def assert_grad_close(analytic, numeric, abs_tol=1e-4, rel_tol=1e-3, name=""):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    tol = np.maximum(abs_tol, rel_tol * np.abs(numeric))
    err = np.abs(analytic - numeric)
    bad = err > tol
    assert not bad.any(), f"{name}: {int(bad.sum())} entries off, worst {err.max():.3g}"


def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def gelu_ref(x: float) -> float:
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def softmax_nll_ref(logits, targets) -> float:
    total = 0.0
    for row, t in zip(np.asarray(logits, dtype=np.float64), targets):
        m = max(row)
        z = sum(math.exp(v - m) for v in row)
        total += -(row[t] - m - math.log(z))
    return total / len(targets)


def adamw_scalar_ref(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    """Plain-float AdamW trajectory for one scalar parameter."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p * (1 - lr * wd)
        p = p - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        out.append(p)
    return out


def lloyd_ref(x, centers, max_iter=100):
    """Textbook Lloyd iterations with explicit loops; empty clusters keep their centre."""
    x = [list(map(float, r)) for r in x]
    centers = [list(map(float, c)) for c in centers]

    def assign():
        labels = []
        for p in x:
            d = [sum((a - b) ** 2 for a, b in zip(p, c)) for c in centers]
            labels.append(d.index(min(d)))
        return labels

    labels = assign()
    for _ in range(max_iter):
        for j in range(len(centers)):
            members = [p for p, lab in zip(x, labels) if lab == j]
            if members:
                centers[j] = [sum(col) / len(members) for col in zip(*members)]
        new = assign()
        if new == labels:
            break
        labels = new
    return np.array(labels), np.array(centers)


def recall_ref(scores, truth, k):
    """Sort every row with Python's sorted (ties by ascending id) and count hits."""
    hits = 0
    for row, t in zip(scores, truth):
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        hits += t in order[:k]
    return hits / len(truth)


def full_loss_gradcheck(model, batch, seed=0, h=1e-3, abs_tol=1e-4, rel_tol=1e-3):
    """Compare every parameter gradient of the summed pretraining loss with central differences.

    The model is cast to float64 first. Mask plan, corrupted ids and the
    matching batch are drawn once, so the loss is a deterministic function
    of the parameters. Returns ``(n_checked, failures)`` where failures
    lists ``(name, index, analytic, numeric)``.
    """
    from maskvl.config import MaskConfig
    from maskvl.objectives import draw_pretrain_inputs, pretrain_losses

    model.astype(np.float64)
    rng = np.random.default_rng(seed)
    plan, corrupted, itm = draw_pretrain_inputs(model, batch, rng, MaskConfig())

    def loss():
        return pretrain_losses(model, batch, plan, corrupted, itm).total

    model.zero_grad()
    loss().backward()
    failures = []
    checked = 0
    for name, p in model.named_parameters():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = central_difference(lambda: loss().item(), p.data, h)
        tol = np.maximum(abs_tol, rel_tol * np.abs(numeric))
        for idx in zip(*np.nonzero(np.abs(analytic - numeric) > tol)):
            failures.append((name, idx, float(analytic[idx]), float(numeric[idx])))
        checked += p.data.size
    return checked, failures


# One line per acceptance criterion, echoed again in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def report(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def note(name: str, detail: str) -> None:
    line = f"INFO  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
