"""Task-oriented feature decomposition and channel-modulated response maps.

A pooled source feature ``f`` is re-weighted channel-wise by the gradient of
its ground-truth logit, ``w = d y_k / d f``, and rescaled so the result keeps
the energy of ``f``:

    s   = sqrt(sum f_m^2 / sum (w_m f_m)^2)
    f_p = s * w * f          (positive, task-discriminative)
    f_n = -f_p               (negative, task-irrelevant)

``w`` and ``s`` are constants with respect to later differentiation; only
``f`` carries gradient into ``f_p``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

DEGENERATE_TOL = 1e-12


class DegenerateWeightError(ArithmeticError):
    """``w * f`` is (numerically) zero, so the energy scale is undefined."""


@dataclass
class DecomposedFeature:
    f: Tensor
    w_cls: Tensor
    s: float
    f_p: Tensor
    f_n: Tensor


def class_gradient(f: Tensor, classifier, labels) -> Tensor:
    """Gradient of the ground-truth logit with respect to the pooled feature.

    ``f`` is ``[M]`` with an int label or ``[N, M]`` with one label per row.
    Rows of a batch are independent, so differentiating the sum of the picked
    logits yields every per-sample gradient at once. The classifier's
    parameters are not touched and the result is detached.
    """
    probe = Tensor(ad.as_tensor(f).data.copy(), requires_grad=True)
    logits = classifier(probe)
    picked = ad.take(logits, labels)
    (w,) = ad.grad(ad.sum_all(picked), [probe])
    return Tensor(w)


def energy_scale(f, w) -> float:
    """``s`` such that ``||s * w * f||^2 == ||f||^2``."""
    f = np.asarray(ad.as_tensor(f).data)
    w = np.asarray(ad.as_tensor(w).data)
    if f.shape != w.shape:
        raise DimensionError(f"energy_scale: f {f.shape} vs w {w.shape}")
    wf = np.sqrt(np.sum((w * f) ** 2))
    if wf <= DEGENERATE_TOL:
        raise DegenerateWeightError(f"||w * f|| = {wf:.3e} is below {DEGENERATE_TOL}")
    return float(np.sqrt(np.sum(f * f)) / wf)


def decompose(f: Tensor, w_cls: Tensor) -> DecomposedFeature:
    """Split a single pooled feature ``[M]`` into positive and negative parts."""
    w_cls = ad.as_tensor(w_cls)
    s = energy_scale(f, w_cls)
    f_p = ad.hadamard(f, Tensor(s * w_cls.data))
    return DecomposedFeature(f=f, w_cls=Tensor(w_cls.data), s=s, f_p=f_p, f_n=ad.neg(f_p))


def positive_features(f: Tensor, w_cls: Tensor) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Batched positive features for ``f[N, M]`` with per-row weights.

    Rows where ``||w * f|| <= 1e-12`` fall back to ``f_p = f``. Returns the
    positive features, the per-row scales (1.0 where degenerate) and the
    boolean degenerate mask.
    """
    fd = f.data
    wd = ad.as_tensor(w_cls).data
    if fd.shape != wd.shape:
        raise DimensionError(f"positive_features: f {fd.shape} vs w {wd.shape}")
    wf_norm = np.sqrt(np.sum((wd * fd) ** 2, axis=-1))
    degenerate = wf_norm <= DEGENERATE_TOL
    safe = np.where(degenerate, 1.0, wf_norm)
    s = np.where(degenerate, 1.0, np.sqrt(np.sum(fd * fd, axis=-1)) / safe)
    coef = np.where(degenerate[..., None], 1.0, s[..., None] * wd)
    return ad.hadamard(f, Tensor(coef)), s, degenerate


def spatial_response_map(fmap, w, sign: int = 1, normalize: bool = True) -> np.ndarray:
    """Channel-weighted, ReLU-clamped, max-normalised map of ``F[M, H, W]``.

    ``sign=+1`` highlights the regions the class gradient favours, ``sign=-1``
    the ones it disfavours. An all-zero response stays all-zero. With
    ``normalize=False`` the clamped raw response is returned.
    """
    fmap = np.asarray(ad.as_tensor(fmap).data)
    w = np.asarray(ad.as_tensor(w).data)
    if sign not in (1, -1):
        raise ValueError(f"sign must be +1 or -1, got {sign}")
    if fmap.ndim != 3 or w.shape != (fmap.shape[0],):
        raise DimensionError(f"spatial_response_map: F {fmap.shape} vs w {w.shape}")
    raw = np.maximum(0.0, np.tensordot(sign * w, fmap, axes=(0, 0)))
    peak = raw.max()
    if not normalize:
        return raw
    return raw / peak if peak > 0 else raw
