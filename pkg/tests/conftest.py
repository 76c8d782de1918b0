import math

import numpy as np
import pytest

from convluna import tensor as T


@pytest.fixture
def high():
    with T.precision("high"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(f, arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(np.asarray(analytic) - np.asarray(numeric))
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(num / den)


def grad_close(analytic, numeric, rtol, atol=1e-8) -> bool:
    """Relative check, with an absolute floor for gradients that are zero in exact arithmetic."""
    return rel_err(analytic, numeric) <= rtol or float(np.abs(np.asarray(analytic) - numeric).max()) <= atol


def naive_softmax(row):
    m = max(row)
    e = [math.exp(v - m) if v != -math.inf else 0.0 for v in row]
    s = sum(e)
    return [v / s for v in e]


def naive_mha(q_in, k_in, v_in, wq, bq, wk, bk, wv, bv, wo, bo, h, divisor=None, key_mask=None):
    """Per-head, per-row loop reference for one (unbatched) attention call."""
    q = q_in @ wq + bq
    k = k_in @ wk + bk
    v = v_in @ wv + bv if wv is not None else v_in
    d = q.shape[1]
    dh = d // h
    out = np.zeros((q.shape[0], d))
    for head in range(h):
        cols = slice(head * dh, (head + 1) * dh)
        div = math.sqrt(dh) if divisor is None else divisor
        for i in range(q.shape[0]):
            logits = []
            for j in range(k.shape[0]):
                if key_mask is not None and not key_mask[j]:
                    logits.append(-math.inf)
                else:
                    logits.append(float(np.dot(q[i, cols], k[j, cols])) / div)
            p = naive_softmax(logits)
            for j in range(k.shape[0]):
                out[i, cols] += p[j] * v[j, cols]
    return out @ wo + bo


def proj_arrays(proj):
    vw = proj.value.weight.data if proj.value is not None else None
    vb = proj.value.bias.data if proj.value is not None else None
    return dict(
        wq=proj.query.weight.data, bq=proj.query.bias.data,
        wk=proj.key.weight.data, bk=proj.key.bias.data,
        wv=vw, bv=vb,
        wo=proj.output.weight.data, bo=proj.output.bias.data,
    )


def randomize(module, rng, scale=0.5):
    """Give every parameter (including zero-initialised biases) random values."""
    for p in module.parameters():
        p.data = rng.normal(0.0, scale, size=p.shape).astype(p.dtype)
