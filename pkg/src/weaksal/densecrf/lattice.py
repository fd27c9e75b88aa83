"""High-dimensional Gaussian filtering on the permutohedral lattice.

Computes, for every point i,

    out_i ~= sum_j exp(-|f_i - f_j|^2 / 2) * v_j        (j = i included)

for positions f already divided by their kernel bandwidths. Values are
splatted onto the vertices of the enclosing lattice simplex with barycentric
weights, blurred with a Gaussian over lattice vertices, and sliced back with
the same weights.

Three blur backends share the splat/slice:

* ``separable``: 1-D Gaussian taps along each of the d+1 lattice axes, in
  sequence. The axes form a tight frame, so the composite blur is isotropic.
  Lattice vertices on blur paths are created as needed, which costs
  O((2m+1)^d) per isolated vertex; used for low dimensions.
* ``direct``: a sparse Gaussian sum between occupied vertices within a
  cutoff radius. No intermediate vertices are needed, so the lattice can be
  made fine in high dimensions; used for d > 3.
* ``ring``: the classic 3-tap blur at roughly unit spacing. It is the
  fallback when the accurate backends would not fit in memory, and its
  errors are of the order of ten percent.

The accurate backends differ from the classic lattice in three ways. The
lattice spacing is a fraction of the kernel width. The blur variance is
reduced by the variance that barycentric splat and slice add. All three
backends rescale the kernel so that its diagonal (self weight) is exactly 1.
The self weight of a point depends only on its barycentric weights and on
which blur paths exist, so it is computed exactly rather than estimated.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from weaksal.errors import DimensionMismatch

DEFAULT_SPACING = {"separable": 0.2, "direct": 0.1}
# tried first by ``auto``: half the spacing, affordable only for small point sets
FINE_SPACING = {"separable": 0.1, "direct": 0.05}
FINE_BUDGET = 4_000_000
DIRECT_CUTOFF = 5.0
# storage cap (vertex pairs or neighbour-table entries) for the accurate backends
DEFAULT_BUDGET = 20_000_000


def _elevate(pos: np.ndarray, scale: float) -> np.ndarray:
    """Embed (n, d) features into the d-dim hyperplane sum(x) = 0 of R^(d+1).

    The embedding is an isometry scaled by ``scale``.
    """
    n, d = pos.shape
    sf = scale / np.sqrt((np.arange(d) + 1.0) * (np.arange(d) + 2.0))
    cf = pos * sf
    el = np.empty((n, d + 1))
    acc = np.zeros(n)
    for i in range(d, 0, -1):
        el[:, i] = acc - i * cf[:, i - 1]
        acc = acc + cf[:, i - 1]
    el[:, 0] = acc
    return el


def _enclosing_simplex(el: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vertex keys (n, d+1, d+1) and barycentric weights (n, d+1)."""
    n, dim = el.shape
    d = dim - 1
    down = np.round(el / dim) * dim
    diff = el - down
    order = np.argsort(-diff, axis=1, kind="stable")
    rank = np.empty((n, dim), dtype=np.int64)
    rank[np.arange(n)[:, None], order] = np.arange(dim)
    excess = np.round(down.sum(axis=1) / dim).astype(np.int64)
    rank += excess[:, None]
    low = rank < 0
    high = rank > d
    down = down + dim * low - dim * high
    rank = rank + dim * low - dim * high

    bary = np.zeros((n, dim + 1))
    delta = (el - down) / dim
    rows = np.arange(n)
    for i in range(dim):
        np.add.at(bary, (rows, d - rank[:, i]), delta[:, i])
        np.add.at(bary, (rows, d + 1 - rank[:, i]), -delta[:, i])
    bary[:, 0] += 1.0 + bary[:, dim]

    down = down.astype(np.int64)
    keys = np.empty((n, dim, dim), dtype=np.int64)
    for k in range(dim):
        keys[:, k, :] = down + k - dim * (rank > d - k)
    return keys, bary[:, :dim]


def _splat_variance(d: int) -> float:
    """Per-axis variance of barycentric splatting, averaged over the simplex.

    Simplex vertices k, l with r = |k - l| are r*D*(D - r) apart (squared);
    averaging the barycentric second moment under a uniform position gives
    sum_r r (D - r)^2 / (D + 1), spread over d axes.
    """
    dim = d + 1
    r = np.arange(1, dim)
    return float((r * (dim - r) ** 2).sum() / (dim + 1) / d)


class _OverBudget(Exception):
    pass


class _VertexHash:
    """Mixed-radix int64 codes for lattice vertices (first d coordinates).

    Codes are linear in the key, so moving along a lattice axis is adding a
    constant; ``margin`` bounds how far lookups may stray from the inputs.
    """

    def __init__(self, keys: np.ndarray, margin: int):
        d = keys.shape[1]
        self.lo = keys.min(axis=0) - margin
        radix = keys.max(axis=0) + margin - self.lo + 1
        if np.log2(radix.astype(np.float64)).sum() >= 62:
            raise _OverBudget("feature range too large for the vertex hash")
        self.mult = np.ones(d, dtype=np.int64)
        for i in range(d - 2, -1, -1):
            self.mult[i] = self.mult[i + 1] * radix[i + 1]
        self.steps = []
        for j in range(d + 1):
            u = -np.ones(d, dtype=np.int64)
            if j < d:
                u[j] = d
            self.steps.append(int((u * self.mult).sum()))

    def encode(self, keys: np.ndarray) -> np.ndarray:
        return ((keys - self.lo) * self.mult).sum(axis=-1)


def _lookup(sorted_codes: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Index of each target in ``sorted_codes``, or len(sorted_codes) if absent."""
    n = len(sorted_codes)
    loc = np.minimum(np.searchsorted(sorted_codes, target), n - 1)
    return np.where(sorted_codes[loc] == target, loc, n)


class PermutohedralLattice:
    """Gaussian filter over fixed positions; build once, filter many times.

    ``blur`` selects the backend: ``separable`` (wide taps with vertex
    creation, accurate, low d), ``direct`` (sparse vertex-pair sum, accurate,
    any d) or ``ring`` (3-tap blur at unit spacing: the classic lattice, a
    coarser approximation). ``ring`` creates the vertices its blur paths
    visit while they fit in ``budget`` and otherwise blurs over occupied
    vertices only (O(n), coarsest). ``auto`` walks from the accurate backend
    for the dimension at half spacing (within ``FINE_BUDGET``), then at the
    default spacing, down to ``ring`` until the storage fits ``budget``.
    """

    def __init__(self, positions, spacing: float | None = None, blur: str = "auto",
                 cutoff: float = DIRECT_CUTOFF, budget: int = DEFAULT_BUDGET):
        pos = np.asarray(positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[0] < 1 or pos.shape[1] < 1:
            raise DimensionMismatch(f"positions must be (n, d), got {pos.shape}")
        if blur not in ("auto", "separable", "direct", "ring"):
            raise ValueError(f"unknown blur backend {blur!r}")
        if spacing is not None and not 0.0 < spacing <= 1.0:
            raise ValueError("lattice spacing must be in (0, 1] kernel widths")
        self.n, self.d = pos.shape
        # centre positions so lattice coordinates stay small
        pos = pos - pos.mean(axis=0)
        if blur == "auto":
            accurate = "separable" if self.d <= 3 else "direct"
            ladder = [(accurate, spacing, budget), ("ring", None, budget)]
            if spacing is None:
                ladder.insert(0, (accurate, FINE_SPACING[accurate], min(budget, FINE_BUDGET)))
        else:
            # an explicitly chosen accurate backend is built whatever it costs
            ladder = [(blur, spacing, budget if blur == "ring" else None)]
        for name, step_size, cap in ladder:
            try:
                self._build(pos, name, step_size, cutoff, cap, True)
                return
            except _OverBudget:
                continue
        # last resort, O(n): blur over the vertices the points occupy
        self._build(pos, "ring", None, cutoff, None, False)

    def _build(self, pos, blur, spacing, cutoff, budget, create):
        n, d = pos.shape
        dim = d + 1
        step = math.sqrt(d * dim)
        if blur == "ring":
            # 3-tap axis blur [1/2, 1, 1/2]; the lattice scale is whatever
            # makes splat + blur + slice reproduce a unit-variance Gaussian
            s = math.sqrt(1.0 / (2.0 * math.log(2.0)))
            self.scale = math.sqrt(dim * dim * s * s + 2.0 * _splat_variance(d))
        else:
            spacing = DEFAULT_SPACING[blur] if spacing is None else float(spacing)
            self.scale = step / spacing
        self.blur = blur
        self.created = False
        self.spacing = step / self.scale
        blur_var = self.scale ** 2 - 2.0 * _splat_variance(d)

        keys, bary = _enclosing_simplex(_elevate(pos, self.scale))
        uniq, inv = np.unique(keys.reshape(n * dim, dim)[:, :d], axis=0, return_inverse=True)
        inv = inv.reshape(n, dim)
        r = np.abs(np.arange(dim)[:, None] - np.arange(dim)[None, :])

        if blur == "direct":
            full = np.concatenate([uniq, -uniq.sum(axis=1, keepdims=True)], axis=1).astype(np.float64)
            tree = cKDTree(full)
            radius = cutoff * math.sqrt(blur_var)
            if budget is not None:
                rng = np.random.default_rng(0)
                probe = rng.choice(len(full), min(256, len(full)), replace=False)
                per_vertex = tree.query_ball_point(full[probe], radius, return_length=True).mean()
                if per_vertex * len(full) > budget:
                    raise _OverBudget("too many vertex pairs")
            dist = tree.sparse_distance_matrix(tree, radius, output_type="coo_matrix")
            dist.data = np.exp(-dist.data ** 2 / (2.0 * blur_var))
            self._blur_matrix = dist.tocsr()
            kappa_pairs = np.exp(-r * dim * (dim - r) / (2.0 * blur_var))
            self._kappa = np.einsum("na,nb,ab->n", bary, bary, kappa_pairs)
            cols, n_vertices = inv, len(uniq)
        else:
            if blur == "ring":
                self._m = 1
                self._w = np.array([0.5, 1.0, 0.5])
            else:
                sd = math.sqrt(blur_var) / dim
                self._m = max(1, math.ceil(3.5 * sd))
                taps = np.arange(-self._m, self._m + 1)
                self._w = np.exp(-taps ** 2 / (2.0 * sd * sd))
            vhash = _VertexHash(uniq, self._m * d * dim + 1)
            base = vhash.encode(uniq)
            pts = base
            if create:
                taps = np.arange(-self._m, self._m + 1, dtype=np.int64)
                for j in range(dim):
                    if budget is not None and len(pts) * len(taps) * dim > budget:
                        raise _OverBudget("too many created vertices")
                    pts = np.unique((pts[:, None] + vhash.steps[j] * taps[None, :]).ravel())
                if budget is not None and len(pts) * len(taps) * dim > budget:
                    raise _OverBudget("too many created vertices")
            self.created = create
            n_vertices = len(pts)
            taps = np.arange(-self._m, self._m + 1, dtype=np.int64)
            # neighbour tables; index n_vertices points at an always-zero slot
            self._neighbours = [
                np.stack([_lookup(pts, pts + k * vhash.steps[j]) for k in taps])
                for j in range(dim)
            ]
            cols = np.searchsorted(pts, base)[inv]
            if create:
                self._kappa = np.einsum("na,nb,ab->n", bary, bary, self._path_sums_complete(dim)[r])
            else:
                self._kappa = self._self_weight_by_paths(keys, bary, cols)
        self.n_vertices = n_vertices
        self._inv_sqrt_kappa = 1.0 / np.sqrt(self._kappa)
        self._splat = sparse.csr_matrix(
            (bary.ravel(), (np.repeat(np.arange(n), dim), cols.ravel())),
            shape=(n, n_vertices))

    def _path_sums_complete(self, dim: int) -> np.ndarray:
        """Blur weight between simplex vertices r apart when every vertex exists.

        Vertex differences inside a simplex are -sum of r distinct axis
        vectors; since the axis vectors sum to zero, the tap counts along the
        axes are (t - 1) on those r axes and t elsewhere, for any integer t.
        """
        m = self._m
        t = np.arange(-m - 1, m + 2)

        def w(n):
            return np.where(np.abs(n) <= m, self._w[np.clip(n + m, 0, 2 * m)], 0.0)

        return np.array([(w(t - 1) ** q * w(t) ** (dim - q)).sum() for q in range(dim)])

    def _self_weight_by_paths(self, keys, bary, vertex_of) -> np.ndarray:
        """Exact lattice self weight when blur paths may hit missing vertices.

        ``vertex_of`` (n, D) holds each point's simplex vertex indices.
        """
        n, dim, _ = keys.shape
        m = self._m
        n_pts = self._neighbours[0].shape[1]
        # extra column keeps "missing" absorbing while walking
        tables = [np.hstack([t, np.full((t.shape[0], 1), n_pts)]) for t in self._neighbours]
        kappa = np.zeros(n)
        for a in range(dim):
            for b in range(dim):
                # source v_a, destination v_b, v_a - v_b = sum_j n_j u_j with
                # n_j = t - [j in T] (a > b) or t + [j in T] (a < b), where T
                # is the set of axes on which the two keys differ by D
                diff = keys[:, a, :] - keys[:, b, :]
                offset = np.abs(diff - (a - b)) // dim * (1 if a < b else -1)
                total = np.zeros(n)
                for t in range(-m - 1, m + 2):
                    nj = offset + t
                    ok = np.all(np.abs(nj) <= m, axis=1)
                    if not ok.any():
                        continue
                    weight = np.prod(self._w[np.clip(nj + m, 0, 2 * m)], axis=1) * ok
                    # the blur runs axis 0 first, so reading back from v_b the
                    # visited vertices are v_b + sum_{j >= k} n_j u_j
                    y = vertex_of[:, b].copy()
                    for j in range(dim - 1, 0, -1):
                        y = tables[j][np.clip(nj[:, j] + m, 0, 2 * m), y]
                    total += weight * (y < n_pts)
                kappa += bary[:, a] * bary[:, b] * total
        return kappa

    @property
    def self_weight(self) -> np.ndarray:
        """Raw lattice self weight of every point, before diagonal rescaling."""
        return self._kappa.copy()

    def filter(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        squeeze = v.ndim == 1
        if squeeze:
            v = v[:, None]
        if v.shape[0] != self.n:
            raise DimensionMismatch(f"{v.shape[0]} values for {self.n} positions")
        grid = self._splat.T @ (v * self._inv_sqrt_kappa[:, None])
        if self.blur == "direct":
            grid = self._blur_matrix @ grid
        else:
            for table in self._neighbours:
                padded = np.vstack([grid, np.zeros((1, grid.shape[1]))])
                grid = np.einsum("t,tnc->nc", self._w, padded[table])
        out = (self._splat @ grid) * self._inv_sqrt_kappa[:, None]
        return out[:, 0] if squeeze else out


def lattice_filter(positions, values, spacing: float | None = None, blur: str = "auto") -> np.ndarray:
    """One-shot Gaussian filter: sum_j exp(-|f_i - f_j|^2 / 2) v_j for each i."""
    pos = np.asarray(positions, dtype=np.float64)
    vals = np.asarray(values, dtype=np.float64)
    if pos.ndim != 2 or vals.shape[0] != pos.shape[0]:
        raise DimensionMismatch(f"positions {pos.shape} and values {vals.shape} disagree")
    return PermutohedralLattice(pos, spacing=spacing, blur=blur).filter(vals)


def gaussian_filter_bruteforce(positions, values) -> np.ndarray:
    """Exact O(n^2) reference for ``lattice_filter``."""
    pos = np.asarray(positions, dtype=np.float64)
    vals = np.asarray(values, dtype=np.float64)
    if vals.shape[0] != pos.shape[0]:
        raise DimensionMismatch(f"positions {pos.shape} and values {vals.shape} disagree")
    sq = (pos ** 2).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * pos @ pos.T, 0.0)
    return np.exp(-0.5 * d2) @ vals
