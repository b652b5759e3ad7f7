"""Central finite-difference checks for every differentiable operation."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decompose import class_gradient, decompose
from .nets import Classifier, Discriminator, Extractor, Nets

STEP = 1e-4
TOL = 1e-4
KINK_MARGIN = 1e-3


def numerical_grad(fn: Callable[[], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    """``d fn / d x`` by central differences, perturbing ``x`` in place."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + step
        hi = fn()
        x[idx] = old - step
        lo = fn()
        x[idx] = old
        g[idx] = (hi - lo) / (2.0 * step)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error relative to the larger gradient (absolute below 1)."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1.0)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check(build: Callable[[], Tensor], inputs: list[Tensor], step: float = STEP) -> float:
    """Worst relative error between tape gradients and finite differences."""
    for t in inputs:
        t.grad = None
    ad.backward(build())
    worst = 0.0
    for t in inputs:
        numeric = numerical_grad(lambda: build().item(), t.data, step)
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def _away_from_kinks(rng: np.random.Generator, shape, margin: float = KINK_MARGIN) -> np.ndarray:
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * (margin + rng.random(shape)), x)


def _projection(rng, shape) -> Tensor:
    return Tensor(rng.normal(size=shape))


def op_cases(seed: int) -> dict[str, Callable[[], float]]:
    """One scalarised finite-difference check per operation for ``seed``."""
    rng = np.random.default_rng(seed)
    cases: dict[str, Callable[[], float]] = {}

    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    cases["matmul"] = lambda: check(lambda: ad.sum_all(ad.matmul(a, b)), [a, b])

    x = Tensor(rng.normal(size=(2, 5, 5)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    px = _projection(rng, (3, 5, 5))
    cases["conv2d"] = lambda: check(lambda: ad.sum_all(ad.hadamard(ad.conv2d(x, k), px)), [x, k])

    r = Tensor(_away_from_kinks(rng, (4, 3)), requires_grad=True)
    pr = _projection(rng, (4, 3))
    cases["relu"] = lambda: check(lambda: ad.sum_all(ad.hadamard(ad.relu(r), pr)), [r])

    fm = Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True)
    pg = _projection(rng, (3,))
    cases["gap"] = lambda: check(lambda: ad.sum_all(ad.hadamard(ad.gap(fm), pg)), [fm])

    mp = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
    pm = _projection(rng, (2, 2, 2))
    cases["max_pool2"] = lambda: check(lambda: ad.sum_all(ad.hadamard(ad.max_pool2(mp), pm)), [mp])
    cases["avg_pool2"] = lambda: check(lambda: ad.sum_all(ad.hadamard(ad.avg_pool2(mp), pm)), [mp])

    h1 = Tensor(rng.normal(size=(5,)), requires_grad=True)
    h2 = Tensor(rng.normal(size=(5,)), requires_grad=True)
    cases["hadamard"] = lambda: check(lambda: ad.sum_all(ad.hadamard(h1, h2)), [h1, h2])

    logits = Tensor(rng.normal(size=(4,)), requires_grad=True)
    label = int(rng.integers(4))
    cases["softmax_cross_entropy"] = lambda: check(lambda: ad.softmax_cross_entropy(logits, label), [logits])

    blogits = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    blabels = rng.integers(0, 4, size=3)
    cases["softmax_cross_entropy_batch"] = lambda: check(
        lambda: ad.softmax_cross_entropy(blogits, blabels), [blogits]
    )

    sm = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    ps = _projection(rng, (2, 3))
    cases["softmax"] = lambda: check(lambda: ad.sum_all(ad.hadamard(ad.softmax(sm), ps)), [sm])

    z = Tensor(rng.normal(size=(4,)), requires_grad=True)
    t = (rng.random(4) < 0.5).astype(float)
    cases["sigmoid_bce"] = lambda: check(lambda: ad.binary_cross_entropy(ad.sigmoid(z), t), [z])

    p = Tensor(rng.uniform(0.05, 0.95, size=(3,)), requires_grad=True)
    cases["binary_cross_entropy"] = lambda: check(lambda: ad.binary_cross_entropy(p, 1.0), [p])

    g_in = Tensor(rng.normal(size=(3,)), requires_grad=True)
    lam = float(rng.uniform(0.0, 1.0))
    pgr = _projection(rng, (3,))
    # finite differences see the identity forward, so the reversed gradient
    # is compared against -lam times the numeric one
    def grl_case():
        g_in.grad = None
        ad.backward(ad.sum_all(ad.hadamard(ad.grl(g_in, lam), pgr)))
        numeric = numerical_grad(lambda: float((g_in.data * pgr.data).sum()), g_in.data)
        return rel_error(g_in.grad, -lam * numeric)

    cases["grl"] = grl_case
    return cases


class _ReluMargin:
    """Records the smallest |input| seen by any ReLU while active."""

    def __enter__(self):
        self.margin = np.inf
        self._relu = ad.relu

        def probe(x):
            self.margin = min(self.margin, float(np.abs(x.data).min(initial=np.inf)))
            return self._relu(x)

        ad.relu = probe
        return self

    def __exit__(self, *exc):
        ad.relu = self._relu


def _small_nets(seed: int) -> Nets:
    ss = np.random.SeedSequence(seed)
    g, c, d = (np.random.default_rng(s) for s in ss.spawn(3))
    G = Extractor(1, g, hidden=2, feat_dim=4, pool="avg")  # max-pool ties are kinks too
    nets = Nets(G, Classifier(4, 3, c), Discriminator(4, d, hidden=5)).eval()
    # non-zero biases keep all-dead patches from sitting exactly on a kink
    for name, t in nets.named_parameters().items():
        if name.endswith("bias"):
            t.data[...] = d.normal(0.0, 0.1, size=t.shape)
    return nets


def composite_cases(seed: int) -> dict[str, Callable[[], float]]:
    """End-to-end G->GAP->C->CE, G->GRL->D and G->f_p->D checks (eval mode).

    Inputs are redrawn until every ReLU pre-activation sits at least
    ``KINK_MARGIN`` away from zero.
    """
    nets = _small_nets(seed)
    rng = np.random.default_rng(seed + 1000)
    for _ in range(100):
        x = Tensor(rng.random((2, 1, 8, 8)), requires_grad=True)
        with _ReluMargin() as probe:
            f = nets.G(x)[1]
            nets.D(f)
        if probe.margin > KINK_MARGIN and np.all(f.data.max(axis=1) > 0):
            break
    else:
        raise RuntimeError(f"no kink-free input with live features found for seed {seed}")
    y = rng.integers(0, 3, size=2)
    targets = np.array([1.0, 0.0])
    lam = 0.7

    def cls_loss():
        return ad.softmax_cross_entropy(nets.C(nets.G(x)[1]), y)

    def dom_loss():
        return ad.binary_cross_entropy(nets.D(ad.grl(nets.G(x)[1], lam)), targets)

    def dom_case():
        # reversed gradient on G, plain gradient on D
        for t in nets.parameters():
            t.grad = None
        ad.backward(dom_loss())
        worst = 0.0
        for t in nets.G.parameters():
            numeric = numerical_grad(lambda: dom_loss().item(), t.data)
            worst = max(worst, rel_error(t.grad, -lam * numeric))
        for t in nets.D.parameters():
            numeric = numerical_grad(lambda: dom_loss().item(), t.data)
            worst = max(worst, rel_error(t.grad, numeric))
        return worst

    def toalign_case():
        f = nets.G(x)[1]
        w = class_gradient(f, nets.C, y)
        coef = Tensor(np.array([decompose(Tensor(f.data[i]), Tensor(w.data[i])).s * w.data[i] for i in range(2)]))

        def loss():
            return ad.binary_cross_entropy(nets.D(ad.hadamard(nets.G(x)[1], coef)), targets)

        return check(loss, nets.G.parameters() + nets.D.parameters())

    return {
        "G->GAP->C->CE": lambda: check(cls_loss, nets.G.parameters() + nets.C.parameters() + [x]),
        "G->GRL->D": dom_case,
        "G->f_p->D": toalign_case,
    }


def run_all(seeds=range(10), tol: float = TOL, echo: Callable[[str], None] | None = print) -> bool:
    ok = True
    worst: dict[str, float] = {}
    for seed in seeds:
        for name, case in {**op_cases(seed), **composite_cases(seed)}.items():
            worst[name] = max(worst.get(name, 0.0), case())
    for name, err in worst.items():
        passed = err < tol
        ok &= passed
        if echo:
            echo(f"{'PASS' if passed else 'FAIL'}  {name:<28s} max rel. error {err:.2e} (tol {tol:.0e})")
    return ok


def decomposition_invariants(trials: int = 1000, seed: int = 0) -> dict[str, float]:
    """Worst violation of each decomposition invariant over random ``(f, w)`` draws.

    Returned values are compared against 1e-9 (energy, relative to ||f||^2),
    0 (negation), 1e-12 (constant weight) and 1e-9 (scale covariance).
    """
    rng = np.random.default_rng(seed)
    worst = {"energy": 0.0, "negation": 0.0, "constant_weight": 0.0, "scale_covariance": 0.0}
    for _ in range(trials):
        m = int(rng.integers(1, 65))
        f = Tensor(np.abs(rng.normal(size=m)) * rng.uniform(0.1, 10.0))
        w = Tensor(rng.normal(size=m))
        d = decompose(f, w)
        ff = float(f.data @ f.data)
        worst["energy"] = max(worst["energy"], abs(float(d.f_p.data @ d.f_p.data) - ff) / ff)
        worst["negation"] = max(worst["negation"], float(np.abs(d.f_n.data + d.f_p.data).max()))
        c = decompose(f, Tensor(np.full(m, rng.uniform(0.01, 100.0))))
        worst["constant_weight"] = max(worst["constant_weight"], float(np.abs(c.f_p.data - f.data).max()))
        for alpha in (0.1, 10.0):
            a = decompose(f, Tensor(alpha * w.data))
            worst["scale_covariance"] = max(worst["scale_covariance"], float(np.abs(a.f_p.data - d.f_p.data).max()))
    return worst


INVARIANT_TOL = {"energy": 1e-9, "negation": 0.0, "constant_weight": 1e-12, "scale_covariance": 1e-9}
