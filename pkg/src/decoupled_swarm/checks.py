"""Numerical self-checks shared by the ``selftest`` command and the test suite.

Each check returns :class:`CheckResult` records carrying the measured value
and the tolerance it is held to.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from . import nets
from . import tensor as T
from .nets import AdaptationField, GaussianDiag
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    measured: float
    tolerance: float
    passed: bool

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<44s} {self.measured:.3e} (tol {self.tolerance:.0e})"


def _projected(op: Callable, weights: np.ndarray) -> Callable:
    return lambda *xs: T.sum(op(*xs) * weights)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.sign(x) * (margin + np.abs(x))


def _simplex(rng, shape, lo=0.0):
    p = rng.uniform(lo, 1.0, size=shape)
    return p / p.sum(axis=-3, keepdims=True)


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """One randomly drawn instance per differentiable primitive: ``name -> (op, inputs)``."""
    s = (2, 4, 4)
    return {
        "add": (T.add, [rng.normal(size=s), rng.normal(size=(2, 1, 4))]),
        "sub": (T.sub, [rng.normal(size=s), rng.normal(size=s)]),
        "mul": (T.mul, [rng.normal(size=s), rng.normal(size=(4,))]),
        "div": (T.div, [rng.normal(size=s), 1.5 + np.abs(rng.normal(size=s))]),
        "neg": (T.neg, [rng.normal(size=s)]),
        "exp": (T.exp, [rng.normal(size=s)]),
        "log": (T.log, [0.2 + rng.uniform(size=s)]),
        "pow": (lambda x: T.pow(x, 0.7), [0.05 + rng.uniform(size=s)]),
        "relu": (T.relu, [_away_from_zero(rng, s)]),
        "softplus": (T.softplus, [3 * rng.normal(size=s)]),
        "channel_softmax": (T.channel_softmax, [2 * rng.normal(size=(3, 3, 3))]),
        "sum": (lambda x: T.sum(x, axis=-4), [rng.normal(size=(2, 2, 3, 3))]),
        "mean": (lambda x: T.mean(x, axis=(-2, -1)), [rng.normal(size=s)]),
        "reshape": (lambda x: T.reshape(x, (4, 8)), [rng.normal(size=s)]),
        "broadcast_to": (lambda x: T.broadcast_to(T.reshape(x, (3, 1, 1)), (3, 2, 2)), [rng.normal(size=3)]),
        "concat_channels": (lambda a, b: T.concat_channels([a, b]), [rng.normal(size=s), rng.normal(size=(1, 4, 4))]),
        "slice_channels": (lambda x: T.slice_channels(x, 1, 3), [rng.normal(size=(4, 3, 3))]),
        "matmul": (T.matmul, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
        "conv2d": (T.conv2d, [rng.normal(size=(2, 5, 4)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)]),
        "conv2d_batched_1x1": (T.conv2d, [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 1, 1))]),
        "maxpool2": (T.maxpool2, [rng.normal(size=s)]),
        "upsample_nearest2": (T.upsample_nearest2, [rng.normal(size=(2, 2, 3))]),
    }


def _gaussians(rng, d=4):
    return [rng.normal(size=d), 0.5 * rng.normal(size=d), rng.normal(size=d), 0.5 * rng.normal(size=d)]


def _field_from_raw(raw: Tensor, c: int) -> AdaptationField:
    w = T.softplus(T.reshape(raw, (c, c) + raw.shape[-2:]))
    col = T.sum(w, axis=-4)
    return AdaptationField(w / T.reshape(col, (1,) + col.shape))


def loss_cases(rng: np.random.Generator, weights: L.LossWeights = L.LossWeights()):
    """Scalar loss functions of raw inputs with one random draw each."""
    c, h, w = 2, 3, 3
    y = np.zeros((c, h, w))
    lab = rng.integers(0, c, size=(h, w))
    for j in range(c):
        y[j] = lab == j

    def composite(logits, raw, mq, lq, mp, lp, total: bool):
        seg = T.channel_softmax(logits)
        field_ = _field_from_raw(raw, c)
        qd, pd = GaussianDiag(mq, lq), GaussianDiag(mp, lp)
        if total:
            return L.total_loss(seg, nets.apply_adaptation(field_, seg), y, field_, qd, pd, weights)
        return L.warmup_loss(seg, y, field_, qd, pd, weights)

    comp_inputs = [rng.normal(size=(c, h, w)), rng.normal(size=(c * c, h, w))] + _gaussians(rng)
    return {
        "ce_loss": (lambda p: L.ce_loss(p, y), [_simplex(rng, (c, h, w), 0.05)]),
        "tr_loss": (lambda raw: L.tr_loss(_field_from_raw(raw, c)), [rng.normal(size=(c * c, h, w))]),
        "nr_loss": (lambda p: L.nr_loss(p, y, weights.q), [_simplex(rng, (c, h, w), 0.05)]),
        "kl_diag_gauss": (lambda a, b, e, d: L.kl_diag_gauss(GaussianDiag(a, b), GaussianDiag(e, d)),
                          _gaussians(rng)),
        "warmup_loss": (lambda *xs: composite(*xs, total=False), [x.copy() for x in comp_inputs]),
        "total_loss": (lambda *xs: composite(*xs, total=True), [x.copy() for x in comp_inputs]),
    }


def gradient_suite(seed: int = 0, points: int = 20, eps: float = 1e-5, tol: float = 1e-4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(points):
        cases = {**primitive_cases(rng), **{f"loss:{k}": v for k, v in loss_cases(rng).items()}}
        for name, (op, inputs) in cases.items():
            if name.startswith("loss:"):
                f = op
            else:
                out_shape = op(*[Tensor(x) for x in inputs]).shape
                f = _projected(op, rng.normal(size=out_shape))
            err = T.grad_check(f, [Tensor(x) for x in inputs], eps)
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(f"grad_check {n}", e, tol, e <= tol) for n, e in worst.items()]


def kl_monte_carlo(seed: int = 0, pairs: int = 10, samples: int = 10 ** 6, dim: int = 4,
                   tol: float = 1e-2) -> list[CheckResult]:
    """Closed-form KL against ``E_q[log q - log p]`` estimated from samples of q."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(pairs):
        mq, lq, mp, lp = _gaussians(rng, dim)
        closed = L.kl_diag_gauss(GaussianDiag(Tensor(mq), Tensor(lq)), GaussianDiag(Tensor(mp), Tensor(lp))).item()
        z = mq + np.exp(lq) * rng.standard_normal((samples, dim))

        def logpdf(x, m, ls):
            return np.sum(-0.5 * ((x - m) / np.exp(ls)) ** 2 - ls - 0.5 * np.log(2 * np.pi), axis=1)

        mc = float(np.mean(logpdf(z, mq, lq) - logpdf(z, mp, lp)))
        err = abs(closed - mc)
        out.append(CheckResult(f"KL closed form vs Monte Carlo #{i}", err, tol, err <= tol))
    return out


def loss_limits(seed: int = 0, points: int = 100) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst_rel, worst_mae = 0.0, 0.0
    for _ in range(points):
        p1 = rng.uniform(0.01, 0.99, size=(1, 1, 1))
        probs = np.concatenate([p1, 1 - p1])
        y = np.zeros_like(probs)
        y[int(rng.integers(0, 2))] = 1.0
        ce = L.ce_loss(probs, y).item()
        nr0 = L.nr_loss(probs, y, 1e-4).item()
        worst_rel = max(worst_rel, abs(nr0 - ce) / ce)
        p_true = float(np.sum(probs * y))
        worst_mae = max(worst_mae, abs(L.nr_loss(probs, y, 1.0).item() - (1 - p_true)))
    return [CheckResult("NR(q=1e-4) vs CE relative error", worst_rel, 1e-3, worst_rel < 1e-3),
            CheckResult("NR(q=1) vs mean(1 - p_true)", worst_mae, 1e-12, worst_mae <= 1e-12)]


def aggregation_exactness(seed: int = 0, tol: float = 1e-15) -> list[CheckResult]:
    from .swarm import aggregate
    from .tensor import ParameterSet

    rng = np.random.default_rng(seed)
    worst_w, worst_eq = 0.0, 0.0
    for k in (1, 2, 3, 4, 7):
        sizes = [int(n) for n in rng.integers(1, 40, size=k)]
        sets = [ParameterSet([("a", Tensor(rng.normal(size=(3, 4)))), ("b", Tensor(rng.normal(size=5)))])
                for _ in range(k)]
        got = aggregate(sets, sizes).flat()
        total = sum(sizes)
        brute = np.zeros_like(got)
        for i in range(got.size):
            brute[i] = sum(n / total * s.flat()[i] for n, s in zip(sizes, sets))
        worst_w = max(worst_w, float(np.max(np.abs(got - brute))))
        eq = aggregate(sets, [5] * k).flat()
        worst_eq = max(worst_eq, float(np.max(np.abs(eq - sum(s.flat() for s in sets) / k))))
    return [CheckResult("aggregate vs brute-force weighted mean", worst_w, tol, worst_w <= tol),
            CheckResult("aggregate equal sizes vs plain mean", worst_eq, tol, worst_eq <= tol)]


def _disk(r: int):
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= r * r]


def brute_erode(labels: np.ndarray, r: int) -> np.ndarray:
    """Set definition, pixel by pixel: p survives iff every disk offset of p is
    an in-grid foreground pixel. Vectorised over leading axes only."""
    h, w = labels.shape[-2:]
    out = np.zeros(labels.shape, dtype=bool)
    for y, x in itertools.product(range(h), range(w)):
        keep = np.ones(labels.shape[:-2], dtype=bool)
        for dy, dx in _disk(r):
            yy, xx = y + dy, x + dx
            if 0 <= yy < h and 0 <= xx < w:
                keep &= labels[..., yy, xx].astype(bool)
            else:
                keep[...] = False
        out[..., y, x] = keep
    return out.astype(np.uint8)


def brute_dilate(labels: np.ndarray, r: int) -> np.ndarray:
    """p is set iff some disk offset of p is an in-grid foreground pixel."""
    h, w = labels.shape[-2:]
    out = np.zeros(labels.shape, dtype=bool)
    for y, x in itertools.product(range(h), range(w)):
        hit = np.zeros(labels.shape[:-2], dtype=bool)
        for dy, dx in _disk(r):
            yy, xx = y + dy, x + dx
            if 0 <= yy < h and 0 <= xx < w:
                hit |= labels[..., yy, xx].astype(bool)
        out[..., y, x] = hit
    return out.astype(np.uint8)


def _pixel(labels, y, x):
    h, w = labels.shape[-2:]
    if 0 <= y < h and 0 <= x < w:
        return labels[..., y, x].astype(bool)
    return np.zeros(labels.shape[:-2], dtype=bool)


def brute_open(labels: np.ndarray, r: int) -> np.ndarray:
    """p is kept iff some disk that contains p fits inside the foreground."""
    h, w = labels.shape[-2:]
    disk = _disk(r)
    out = np.zeros(labels.shape, dtype=bool)
    for y, x in itertools.product(range(h), range(w)):
        hit = np.zeros(labels.shape[:-2], dtype=bool)
        for oy, ox in disk:
            cy, cx = y - oy, x - ox
            fits = np.ones(labels.shape[:-2], dtype=bool)
            for dy, dx in disk:
                fits &= _pixel(labels, cy + dy, cx + dx)
            hit |= fits
        out[..., y, x] = hit
    return out.astype(np.uint8)


def brute_close(labels: np.ndarray, r: int) -> np.ndarray:
    """p is set iff every disk that contains p touches the foreground.

    Disk centres range over the whole plane, not just the grid.
    """
    h, w = labels.shape[-2:]
    disk = _disk(r)
    out = np.zeros(labels.shape, dtype=bool)
    for y, x in itertools.product(range(h), range(w)):
        keep = np.ones(labels.shape[:-2], dtype=bool)
        for oy, ox in disk:
            cy, cx = y - oy, x - ox
            touch = np.zeros(labels.shape[:-2], dtype=bool)
            for dy, dx in disk:
                touch |= _pixel(labels, cy + dy, cx + dx)
            keep &= touch
        out[..., y, x] = keep
    return out.astype(np.uint8)


def all_grids(size: int) -> np.ndarray:
    n = size * size
    codes = np.arange(2 ** n)[:, None]
    return ((codes >> np.arange(n)) & 1).astype(np.uint8).reshape(-1, size, size)


def morphology_oracle(size: int = 4, r: int = 1) -> list[CheckResult]:
    """Compare all four ops with the set-definition brute force on every ``size x size`` grid."""
    from .synthdata import morphology

    grids = all_grids(size)
    ref = {"erode": brute_erode(grids, r), "dilate": brute_dilate(grids, r),
           "open": brute_open(grids, r), "close": brute_close(grids, r)}
    out = []
    for op, want in ref.items():
        got = morphology(grids, op, r)
        bad = int(np.sum(np.any(got != want, axis=(-2, -1))))
        out.append(CheckResult(f"morphology {op} vs set definition ({len(grids)} grids {size}x{size}, r={r})",
                               float(bad), 0.0, bad == 0))
    return out


def run_all(seed: int = 0) -> list[CheckResult]:
    """Everything the ``selftest`` command reports, in a fixed order."""
    return (gradient_suite(seed) + kl_monte_carlo(seed) + loss_limits(seed) + aggregation_exactness(seed)
            + morphology_oracle())
