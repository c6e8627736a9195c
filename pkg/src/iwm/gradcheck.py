"""Finite-difference gradient checks for every op kind of the tensor engine.

Each case builds a small random graph around one op in float64, contracts the
output with a fixed random cotangent and compares the reverse-mode gradient
with central differences. The error reported per input is
``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T

STEP = 1e-5
TOLERANCE = 1e-5


def _shape(rng, ndim=None, lo=1, hi=8):
    ndim = ndim or int(rng.integers(1, 4))
    return tuple(int(rng.integers(lo, hi + 1)) for _ in range(ndim))


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x) + 0.0


def _positive(rng, shape, lo=0.3, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def _broadcast_pair(rng):
    full = _shape(rng, int(rng.integers(2, 4)))
    small = tuple(1 if rng.random() < 0.4 else s for s in full)[int(rng.integers(0, 2)):]
    return (full, small) if rng.random() < 0.5 else (small, full)


def _case(kind: str, rng):
    """Return (fn, inputs) for one op kind."""
    n = rng.standard_normal
    if kind in ("add", "sub", "mul"):
        sa, sb = _broadcast_pair(rng)
        op = {"add": T.add, "sub": T.sub, "mul": T.mul}[kind]
        return (lambda a, b: op(a, b)), [n(sa), n(sb)]
    if kind == "div":
        sa, sb = _broadcast_pair(rng)
        return (lambda a, b: a / b), [n(sa), _positive(rng, sb) * np.where(rng.random(sb) < 0.5, -1, 1)]
    if kind == "neg":
        return (lambda a: -a), [n(_shape(rng))]
    if kind == "exp":
        return T.exp, [rng.uniform(-2, 2, _shape(rng))]
    if kind == "log":
        return T.log, [_positive(rng, _shape(rng))]
    if kind == "sqrt":
        return T.sqrt, [_positive(rng, _shape(rng))]
    if kind == "power":
        e = float(rng.choice([2.0, 3.0, 0.5, -1.0, 1.5]))
        return (lambda a: T.power(a, e)), [_positive(rng, _shape(rng))]
    if kind in ("sum", "mean"):
        s = _shape(rng)
        axis = None if rng.random() < 0.3 else int(rng.integers(0, len(s)))
        keep = bool(rng.random() < 0.5)
        op = T.sum_ if kind == "sum" else T.mean
        return (lambda a: op(a, axis=axis, keepdims=keep)), [n(s)]
    if kind == "broadcast":
        full = _shape(rng, 3)
        small = tuple(1 if rng.random() < 0.5 else s for s in full)[1:]
        return (lambda a: T.broadcast_to(a, full)), [n(small)]
    if kind == "reshape":
        s = _shape(rng, 3)
        return (lambda a: T.reshape(a, (s[0] * s[1], s[2]))), [n(s)]
    if kind == "transpose":
        s = _shape(rng, 3)
        axes = tuple(int(i) for i in rng.permutation(3))
        return (lambda a: T.transpose(a, axes)), [n(s)]
    if kind == "concat":
        s = list(_shape(rng, 2))
        s2 = list(s)
        axis = int(rng.integers(0, 2))
        s2[axis] = int(rng.integers(1, 9))
        return (lambda a, b: T.concat([a, b], axis=axis)), [n(tuple(s)), n(tuple(s2))]
    if kind == "slice":
        s = _shape(rng, 3, lo=2)
        i0 = int(rng.integers(0, s[0]))
        stop = int(rng.integers(1, s[1] + 1))
        return (lambda a: a[i0, :stop, ::2]), [n(s)]
    if kind == "gather_rows":
        b, rows, d, k = (int(rng.integers(1, 9)) for _ in range(4))
        idx = rng.integers(0, rows, size=(b, k))
        if rng.random() < 0.5:
            return (lambda a: T.gather_rows(a, idx)), [n((rows, d))]
        return (lambda a: T.gather_rows(a, idx)), [n((b, rows, d))]
    if kind == "matmul":
        b, m, k, p = (int(rng.integers(1, 9)) for _ in range(4))
        if rng.random() < 0.5:
            return (lambda a, w: a @ w), [n((b, m, k)), n((k, p))]
        return (lambda a, w: a @ w), [n((b, m, k)), n((b, k, p))]
    if kind == "gelu":
        return T.gelu, [n(_shape(rng)) * 2]
    if kind == "relu":
        return T.relu, [_away_from_zero(rng, _shape(rng))]
    if kind == "softmax":
        s = _shape(rng, int(rng.integers(1, 4)))
        axis = -1 if rng.random() < 0.5 else 0
        return (lambda a: T.softmax(a, axis=axis)), [n(s) * 2]
    if kind == "layer_norm":
        s = _shape(rng, int(rng.integers(1, 4)), lo=3)
        # rows with a tiny spread make the map nearly singular and swamp the difference quotient
        x = n(s)
        x += np.linspace(-1.0, 1.0, s[-1])
        return (lambda a: T.layer_norm(a, -1, 1e-6)), [x]
    raise KeyError(f"no gradient check for op kind {kind!r}")


def _scalar(fn, arrays, cot):
    out = fn(*[T.Tensor(a) for a in arrays])
    return float(np.sum(out.data * cot))


def numeric_grads(fn, arrays: list[np.ndarray], cot: np.ndarray, h: float = STEP) -> list[np.ndarray]:
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gf = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = _scalar(fn, arrays, cot)
            flat[i] = orig - h
            down = _scalar(fn, arrays, cot)
            flat[i] = orig
            gf[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def analytic_grads(fn, arrays: list[np.ndarray], cot: np.ndarray) -> list[np.ndarray]:
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    loss = T.sum_(out * T.Tensor(cot))
    by_id = T.backward(loss, leaves)
    return [by_id[id(t)] for t in leaves]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)), 1e-8)
    return float(np.abs(a - b).max(initial=0.0)) / scale


@dataclass
class GradcheckResult:
    kind: str
    seeds: int
    max_error: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def check_kind(kind: str, seed: int) -> float:
    rng = np.random.default_rng(np.random.SeedSequence([seed, sum(map(ord, kind))]))
    fn, arrays = _case(kind, rng)
    arrays = [np.asarray(a, dtype=np.float64).copy() for a in arrays]
    with T.no_grad():
        out_shape = fn(*[T.Tensor(a) for a in arrays]).shape
    cot = rng.standard_normal(out_shape)
    ana = analytic_grads(fn, arrays, cot)
    num = numeric_grads(fn, arrays, cot)
    return max(relative_error(a, b) for a, b in zip(ana, num))


def run_gradcheck(seeds: int = 20, kinds=T.OP_KINDS) -> list[GradcheckResult]:
    results = []
    for kind in kinds:
        worst = max(check_kind(kind, s) for s in range(seeds))
        results.append(GradcheckResult(kind, seeds, worst))
    return results


def main_report(seeds: int = 20) -> tuple[list[GradcheckResult], float]:
    start = time.perf_counter()
    res = run_gradcheck(seeds)
    return res, time.perf_counter() - start
