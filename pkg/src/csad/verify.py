"""Reference oracles and the finite-difference gradient suite.

The brute-force functions here are deliberately naive nested loops over
Python floats.  They import nothing from the kernels they check.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .errors import NumericError, ParameterError, ShapeError

DEFAULT_EPS = 1e-5
DEFAULT_THRESHOLD = 1e-4
END_TO_END_THRESHOLD = 1e-3


def numeric_grad(f: Callable[[np.ndarray], float], x, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central-difference gradient of the scalar function ``f`` at ``x``."""
    if eps <= 0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = float(f(x))
        flat[i] = old - eps
        fm = float(f(x))
        flat[i] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            idx = np.unravel_index(i, x.shape)
            raise NumericError(f"non-finite function value at coordinate {tuple(int(k) for k in idx)}")
        g[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric) -> tuple[float, int]:
    """Largest coordinate-wise ``|a-b| / max(|a|, |b|, 1e-8)`` and its flat index."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    b = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"gradient shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0, 0
    err = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    k = int(np.argmax(err))
    return float(err[k]), k


@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    worst_index: int
    threshold: float = DEFAULT_THRESHOLD
    instances: int = 1

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.threshold

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.op_name}: max_rel_error={self.max_rel_error:.3e} "
            f"worst_index={self.worst_index} instances={self.instances} threshold={self.threshold:g}"
        )


def check_gradient(op_name, f, analytic, x, threshold=DEFAULT_THRESHOLD, eps=DEFAULT_EPS) -> GradCheckReport:
    err, k = relative_error(analytic, numeric_grad(f, x, eps))
    return GradCheckReport(op_name, err, k, threshold)


# ---------------------------------------------------------------- brute force


def brute_conv2d(x, kernels, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation by explicit loops: batch, out-channel, row, column, in-channel, tap row, tap column."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(kernels, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1]:
        raise ShapeError(f"brute_conv2d: incompatible input {x.shape} and kernels {k.shape}")
    n, ci, h, w = x.shape
    co, _, kh, kw = k.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"brute_conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    padded = [[[[0.0] * wp for _ in range(hp)] for _ in range(ci)] for _ in range(n)]
    for b in range(n):
        for c in range(ci):
            for r in range(h):
                for s in range(w):
                    padded[b][c][r + padding][s + padding] = float(x[b, c, r, s])
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for r in range(ho):
                for s in range(wo):
                    acc = 0.0
                    for c in range(ci):
                        for i in range(kh):
                            for j in range(kw):
                                acc += float(k[o, c, i, j]) * padded[b][c][r * stride + i][s * stride + j]
                    out[b, o, r, s] = acc
    return out[0] if squeeze else out


def brute_correlation(x, y) -> np.ndarray:
    """``z[i, j] = sum_c x[c, i] * y[c, j] / C`` over flattened positions."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 3 or x.shape != y.shape:
        raise ShapeError(f"brute_correlation: need equal (C,H,W) stacks, got {x.shape} and {y.shape}")
    c, h, w = x.shape
    p = h * w
    z = np.zeros((p, p))
    for i in range(p):
        ri, si = divmod(i, w)
        for j in range(p):
            rj, sj = divmod(j, w)
            acc = 0.0
            for k in range(c):
                acc += float(x[k, ri, si]) * float(y[k, rj, sj])
            z[i, j] = acc / c
    return z


def brute_metrics(pred_mask, truth) -> tuple[float, float, float, float, float]:
    """Dice, sensitivity, precision, VOE, RVD in percent by counting pixels one at a time."""
    a = np.asarray(pred_mask)
    b = np.asarray(truth)
    if a.shape != b.shape:
        raise ShapeError(f"brute_metrics: shapes {a.shape} and {b.shape} differ")
    tp = fp = fn = 0
    for pa, pb in zip(a.reshape(-1).tolist(), b.reshape(-1).tolist()):
        if pa and pb:
            tp += 1
        elif pa:
            fp += 1
        elif pb:
            fn += 1
    if tp + fp + fn == 0:
        return 100.0, 100.0, 100.0, 0.0, 0.0
    size_a, size_b = tp + fp, tp + fn
    dice = 100.0 * (2 * tp) / (size_a + size_b)
    sens = 100.0 * tp / size_b if size_b else 0.0
    prec = 100.0 * tp / size_a if size_a else 0.0
    voe = 100.0 - 100.0 * tp / (tp + fp + fn)
    rvd = 100.0 * (size_b - size_a) / size_a if size_a else math.nan
    return dice, sens, prec, voe, rvd


# ----------------------------------------------------------- gradient suite


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    # well-separated values so a max never changes under an eps perturbation
    return (rng.permutation(int(np.prod(shape))).reshape(shape) + rng.uniform(0.1, 0.9, size=shape)) / 4.0


def _case_conv2d(rng):
    from .tensor import conv2d, conv2d_backward

    n, ci, co = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k, stride, padding = int(rng.choice([1, 3])), int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h, w = int(rng.integers(k, 7)), int(rng.integers(k, 7))
    x = rng.normal(size=(n, ci, h, w))
    kern = rng.normal(size=(co, ci, k, k))
    v = rng.normal(size=conv2d(x, kern, stride, padding).shape)
    gx, gw = conv2d_backward(x, kern, v, stride, padding)
    yield (lambda t: float((conv2d(t, kern, stride, padding) * v).sum())), gx, x
    yield (lambda t: float((conv2d(x, t, stride, padding) * v).sum())), gw, kern


def _case_softmax(rng):
    from .tensor import spatial_softmax, spatial_softmax_backward

    m = rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(2, 6)), int(rng.integers(2, 6))))
    v = rng.normal(size=m.shape)
    yield (lambda t: float((spatial_softmax(t) * v).sum())), spatial_softmax_backward(m, v), m


def _case_upsample(rng):
    from .tensor import bilinear_upsample, bilinear_upsample_backward

    c, h, w = int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(1, 6))
    th, tw = int(rng.integers(1, 10)), int(rng.integers(1, 10))
    x = rng.normal(size=(c, h, w))
    v = rng.normal(size=(c, th, tw))
    yield (lambda t: float((bilinear_upsample(t, th, tw) * v).sum())), bilinear_upsample_backward(v, h, w), x


def _case_relu(rng):
    from .tensor import relu, relu_backward

    x = _away_from_zero(rng, (int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 5))))
    v = rng.normal(size=x.shape)
    yield (lambda t: float((relu(t) * v).sum())), relu_backward(x, v), x


def _case_maxpool(rng):
    from .tensor import maxpool2x2, maxpool2x2_backward

    x = _distinct(rng, (int(rng.integers(1, 3)), 2 * int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4))))
    v = rng.normal(size=maxpool2x2(x).shape)
    yield (lambda t: float((maxpool2x2(t) * v).sum())), maxpool2x2_backward(x, v), x


def _case_matmul(rng):
    from .tensor import matmul, matmul_backward

    p, q, r = (int(v) for v in rng.integers(1, 6, size=3))
    a, b = rng.normal(size=(p, q)), rng.normal(size=(q, r))
    v = rng.normal(size=(p, r))
    ga, gb = matmul_backward(a, b, v)
    yield (lambda t: float((matmul(t, b) * v).sum())), ga, a
    yield (lambda t: float((matmul(a, t) * v).sum())), gb, b


def _case_amgb(rng):
    from .attention import amgb, amgb_backward

    if rng.uniform() < 0.3:
        # few positions, many channels: exercises the Gram-matrix route
        h, w = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        c = 4 * h * w + int(rng.integers(0, 4))
    else:
        c, h, w = int(rng.integers(1, 5)), int(rng.integers(1, 6)), int(rng.integers(1, 6))
    th, tw = int(rng.integers(h, 9)), int(rng.integers(w, 9))
    f = rng.normal(scale=0.5, size=(c, h, w))
    v = rng.normal(size=(th, tw))
    yield (lambda t: float((amgb(t, th, tw) * v).sum())), amgb_backward(f, th, tw, v), f


def _random_map(rng, h, w):
    # bounded logits keep every probability moderate; the difference quotient's
    # truncation error grows like 1/p**2
    e = np.exp(rng.uniform(-1.5, 1.5, size=(h, w)))
    return e / e.sum()


def _conditioned(f, x, ratio=1e-2) -> bool:
    """True when no coordinate of the reference gradient is nearly zero.

    A coordinate whose derivative is tiny next to the largest one is dominated
    by the truncation and round-off error of the difference quotient, which no
    relative-error test can judge.  The decision uses the
    numeric oracle, never the implementation under test.
    """
    g = np.abs(numeric_grad(f, x))
    return bool(g.min() >= ratio * g.max())


def _case_l_ad(rng):
    from .attention import l_ad, l_ad_backward

    # at least two pixels: a 1x1 map is the constant [[1]] and has a zero gradient
    while True:
        h, w = int(rng.integers(1, 6)), int(rng.integers(2, 6))
        a, b = _random_map(rng, h, w), _random_map(rng, h, w)
        if _conditioned(lambda t: l_ad(t, b), a) and _conditioned(lambda t: l_ad(a, t), b):
            break
    ga, gb = l_ad_backward(a, b)
    yield (lambda t: l_ad(t, b)), ga, a
    yield (lambda t: l_ad(a, t)), gb, b


def _case_l_csad(rng):
    from .attention import build_distill_plan, l_csad

    while True:
        n = int(rng.integers(2, 5))
        h, w = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        plan = build_distill_plan(["PLC", "ILC"][int(rng.integers(0, 2))], n)
        maps = np.stack([_random_map(rng, h, w) for _ in range(2 * n)])

        def f(t):
            return l_csad(list(t[:n]), list(t[n:]), plan).value

        # maps outside every pair have an exactly zero gradient; judge the rest
        used = sorted({p.m - 1 for p in plan.pairs} | {p.m2 - 1 for p in plan.pairs})
        idx = used + [n + i for i in used]
        g = np.abs(numeric_grad(f, maps))[idx]
        if g.min() >= 1e-2 * g.max():
            break
    res = l_csad(list(maps[:n]), list(maps[n:]), plan)
    analytic = np.stack(res.grad_t2w + res.grad_adc)
    yield f, analytic, maps


def _case_scff(rng):
    from .scff import scff_backward, scff_forward

    c, ct = int(rng.integers(1, 5)), int(rng.integers(1, 4))
    h, w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    ft, fa = rng.normal(size=(c, h, w)), rng.normal(size=(c, h, w))
    proj = rng.normal(scale=0.7, size=(ct, c, 1, 1))
    out, cache = scff_forward(ft, fa, proj)
    v = rng.normal(size=out.shape)
    gt, ga, gp = scff_backward(cache, v)
    yield (lambda t: float((scff_forward(t, fa, proj)[0] * v).sum())), gt, ft
    yield (lambda t: float((scff_forward(ft, t, proj)[0] * v).sum())), ga, fa
    yield (lambda t: float((scff_forward(ft, fa, t)[0] * v).sum())), gp, proj


def _case_dice(rng):
    from .objectives import dice_loss, dice_loss_backward

    shape = (int(rng.integers(1, 6)), int(rng.integers(1, 6)))
    p = rng.uniform(0.05, 0.95, size=shape)
    t = (rng.uniform(size=shape) < 0.4).astype(float)
    sigma = float(rng.uniform(0.5, 2.0))
    yield (lambda q: dice_loss(q, t, sigma)), dice_loss_backward(p, t, sigma), p


def _case_wbce(rng):
    from .objectives import wbce_loss, wbce_loss_backward

    shape = (int(rng.integers(1, 6)), int(rng.integers(1, 6)))
    p = rng.uniform(0.05, 0.95, size=shape)
    t = (rng.uniform(size=shape) < 0.4).astype(float)
    lam = float(rng.uniform(0.05, 0.95))
    yield (lambda q: wbce_loss(q, t, lam)), wbce_loss_backward(p, t, lam), p


GRADIENT_CASES: dict[str, Callable[[np.random.Generator], Iterator]] = {
    "conv2d": _case_conv2d,
    "spatial_softmax": _case_softmax,
    "bilinear_upsample": _case_upsample,
    "relu": _case_relu,
    "maxpool2x2": _case_maxpool,
    "matmul": _case_matmul,
    "amgb": _case_amgb,
    "l_ad": _case_l_ad,
    "l_csad": _case_l_csad,
    "scff_fuse": _case_scff,
    "dice_loss": _case_dice,
    "wbce_loss": _case_wbce,
}


def gradcheck_op(name: str, instances: int = 50, seed: int = 0, threshold: float = DEFAULT_THRESHOLD) -> GradCheckReport:
    case = GRADIENT_CASES[name]
    rng = np.random.default_rng([seed, sum(name.encode())])
    worst = GradCheckReport(name, 0.0, 0, threshold, instances)
    for _ in range(instances):
        for f, analytic, x in case(rng):
            err, k = relative_error(analytic, numeric_grad(f, x))
            if err > worst.max_rel_error or not math.isfinite(err):
                worst.max_rel_error, worst.worst_index = err, k
    return worst


def gradcheck_network(seed: int = 0, threshold: float = END_TO_END_THRESHOLD) -> GradCheckReport:
    """Every parameter of a tiny network against finite differences of the total loss."""
    from .net import NetConfig, init_model, loss_and_gradients, total_loss_value

    cfg = NetConfig(input_size=(8, 8), stages=2, base_channels=2)
    model = init_model(cfg, seed)
    rng = np.random.default_rng([seed, 0xE2E])
    # zero biases put every pre-activation fed only by dead units exactly on the relu
    # kink; move them to a generic point so central differences are meaningful
    for name, value in model.params.items():
        if name.endswith(".b") and name != "head.b":
            value[:] = _away_from_zero(rng, value.shape)
    t2w = rng.uniform(size=(2, 1, 8, 8))
    adc = rng.uniform(size=(2, 1, 8, 8))
    masks = (rng.uniform(size=(2, 8, 8)) < 0.3).astype(float)
    _, grads = loss_and_gradients(model, t2w, adc, masks)
    report = GradCheckReport("network", 0.0, 0, threshold, 1)
    offset = 0
    for name, value in model.params.items():

        def f(t, name=name):
            model.params[name] = t
            return total_loss_value(model, t2w, adc, masks)

        original = value.copy()
        err, k = relative_error(grads[name], numeric_grad(f, original))
        model.params[name] = original
        if err > report.max_rel_error:
            report.max_rel_error, report.worst_index = err, offset + k
        offset += value.size
    return report


def run_gradcheck(
    threshold: float = DEFAULT_THRESHOLD,
    instances: int = 50,
    seed: int = 0,
    network_threshold: float = END_TO_END_THRESHOLD,
    emit: Callable[[str], None] | None = None,
) -> list[GradCheckReport]:
    reports = []
    for name in GRADIENT_CASES:
        t0 = time.perf_counter()
        r = gradcheck_op(name, instances, seed, threshold)
        reports.append(r)
        if emit:
            emit(f"{r.line()} seconds={time.perf_counter() - t0:.2f}")
    t0 = time.perf_counter()
    r = gradcheck_network(seed, network_threshold)
    reports.append(r)
    if emit:
        emit(f"{r.line()} seconds={time.perf_counter() - t0:.2f}")
    return reports
