"""Two-label fully connected CRF with mean-field inference.

Labels are background (index 0) and foreground (index 1). The pairwise term
is a Potts penalty weighted by an appearance kernel over (x, y, r, g, b) and
a smoothness kernel over (x, y). Message passing either goes through the
permutohedral lattice or, for small images, through explicit dense kernel
matrices.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from weaksal.densecrf.lattice import PermutohedralLattice
from weaksal.errors import ConfigError
from weaksal.imagecore import Image, SaliencyMap, check_same_shape

Q_FLOOR = 1e-20
OUT_CLIP = 1e-12
# below this many pixels the dense O(n^2) kernels are exact and still cheap
DENSE_MAX_PIXELS = 4096


@dataclass(frozen=True)
class CrfParams:
    iterations: int = 10
    w_bilateral: float = 5.0
    w_spatial: float = 3.0
    theta_alpha: float = 60.0
    theta_beta: float = 10.0
    theta_gamma: float = 3.0
    unary_clamp: float = 1e-5

    def validate(self) -> None:
        if self.iterations < 1:
            raise ConfigError("CRF iterations must be >= 1")
        if self.w_bilateral < 0 or self.w_spatial < 0:
            raise ConfigError("CRF kernel weights must be >= 0")
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ConfigError("CRF bandwidths must be > 0")
        if not 0.0 < self.unary_clamp < 0.5:
            raise ConfigError("CRF unary_clamp must be in (0, 0.5)")


@dataclass(frozen=True)
class UnaryPotentials:
    """Per-pixel energies, shape (n, 2): column 0 background, column 1 foreground."""

    energies: np.ndarray
    shape: tuple[int, int]


def build_unary(prob: SaliencyMap, params: CrfParams | None = None) -> UnaryPotentials:
    eps = (params or CrfParams()).unary_clamp
    p = np.clip(prob.values.ravel(), eps, 1.0 - eps)
    q = np.clip(1.0 - prob.values.ravel(), eps, 1.0 - eps)
    return UnaryPotentials(np.stack([-np.log(q), -np.log(p)], axis=1), prob.shape)


def kernel_features(image: Image, params: CrfParams) -> tuple[np.ndarray, np.ndarray]:
    """Bandwidth-scaled appearance (n, 5) and smoothness (n, 2) features."""
    h, w = image.shape
    yy, xx = np.mgrid[0:h, 0:w]
    xy = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)
    rgb = image.pixels.reshape(-1, 3).astype(np.float64)
    appearance = np.concatenate([xy / params.theta_alpha, rgb / params.theta_beta], axis=1)
    return appearance, xy / params.theta_gamma


def _dense_gaussian(f: np.ndarray) -> np.ndarray:
    sq = (f ** 2).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * f @ f.T, 0.0)
    return np.exp(-0.5 * d2)


class PairwiseKernels:
    """Weighted sum of both Gaussian kernels with the self term removed.

    Depends only on the image and the kernel parameters, so one instance can
    serve every CRF run on the same image.
    """

    def __init__(self, image: Image, params: CrfParams, method: str = "auto"):
        if method not in ("auto", "lattice", "dense"):
            raise ConfigError(f"unknown CRF method {method!r}")
        n = image.height * image.width
        if method == "auto":
            method = "dense" if n <= DENSE_MAX_PIXELS else "lattice"
        self.method = method
        self.shape = image.shape
        self.w_bilateral = params.w_bilateral
        self.w_spatial = params.w_spatial
        appearance, smooth = kernel_features(image, params)
        if method == "dense":
            k = params.w_bilateral * _dense_gaussian(appearance) + params.w_spatial * _dense_gaussian(smooth)
            np.fill_diagonal(k, 0.0)
            self._dense = k
        else:
            self._lattices = (PermutohedralLattice(appearance), PermutohedralLattice(smooth))

    def message(self, q: np.ndarray) -> np.ndarray:
        """sum over j != i of the weighted kernel times q_j, for each label."""
        if self.method == "dense":
            return self._dense @ q
        bil, spat = self._lattices
        # both lattice kernels are normalised to a self weight of exactly 1
        return (self.w_bilateral * (bil.filter(q) - q)
                + self.w_spatial * (spat.filter(q) - q))


def _normalize(e: np.ndarray) -> np.ndarray:
    q = np.exp(-(e - e.min(axis=1, keepdims=True)))
    return q / np.maximum(q.sum(axis=1, keepdims=True), Q_FLOOR)


def mean_field(unary: UnaryPotentials, kernels: PairwiseKernels, iterations: int,
               callback: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """Run mean-field updates; returns Q with shape (n, 2).

    ``callback(it, q)`` sees the normalised marginals after each iteration.
    """
    u = unary.energies
    q = _normalize(u)
    for it in range(iterations):
        msg = kernels.message(q)
        # Potts: label l pays for the mass the neighbours put on the other label
        q = _normalize(u + msg[:, ::-1])
        if callback is not None:
            callback(it, q)
    return q


def mean_field_refine(image: Image, prob: SaliencyMap, params: CrfParams | None = None,
                      method: str = "auto", kernels: PairwiseKernels | None = None,
                      callback: Callable[[int, np.ndarray], None] | None = None) -> SaliencyMap:
    """Refine a foreground probability map with the dense CRF."""
    params = params or CrfParams()
    params.validate()
    check_same_shape(image, prob, what="image and saliency map")
    if kernels is None:
        kernels = PairwiseKernels(image, params, method)
    elif kernels.shape != image.shape:
        check_same_shape(image, kernels, what="image and cached CRF kernels")
    q = mean_field(build_unary(prob, params), kernels, params.iterations, callback)
    fg = np.clip(q[:, 1], OUT_CLIP, 1.0 - OUT_CLIP)
    return SaliencyMap(fg.reshape(image.shape))
