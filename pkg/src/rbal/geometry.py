"""Discretized polarized manifolds: quadrature grids, section frames, metrics and operators.

Every structured backend is a product of Riemann spheres.  Each sphere factor is
parametrized by ``w = tan(theta/2) exp(i phi)`` on a Gauss-Legendre grid in
``cos(theta)`` times a uniform grid in ``phi``.  Section values ``Z`` and their
holomorphic derivatives ``dZ = dZ/dw`` are analytic; quadrature weights are the
Lebesgue measure ``dA`` of the ``w``-plane.

Finite-difference operators act in the frame normalized by the round sphere
metric so that every quantity they touch is smooth across both poles.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
from scipy.special import comb, roots_legendre

from . import kernels
from .calibration import load_calibration
from .errors import ConfigError, DegenerateError, ValidationError

__all__ = [
    "ChartGrid",
    "SectionFrame",
    "FiberMetric",
    "KahlerData",
    "build_p1_backend",
    "build_p1_subsystem",
    "build_product_backend",
    "load_sampled_variety",
    "save_sampled_variety",
    "pullback_metric",
    "metric_from_potential",
    "laplacian",
    "scalar_curvature",
    "reference_potential",
    "potential_with_increment",
    "gradient_pairing",
    "hamiltonian_residual",
]


@dataclass(frozen=True)
class SphereFactor:
    """One Riemann-sphere factor of a structured grid."""

    level_k: int
    n_theta: int
    n_phi: int


@dataclass(eq=False)
class ChartGrid:
    """Quadrature grid on a single chart.

    Attributes
    ----------
    chart_id : int
    params : ndarray, shape (P, d)
        Real coordinates per point; ``(theta_a, phi_a)`` pairs for sphere factors.
    weights : ndarray, shape (P,)
        Lebesgue measure of the holomorphic chart carried by each point.
    shape : tuple of int or None
        Tensor-product shape, ``None`` for scattered samples.
    periodic : tuple of bool or None
        Periodicity flag per tensor axis.
    factors : tuple of SphereFactor
        Sphere factors (structured backends only).
    """

    chart_id: int
    params: np.ndarray
    weights: np.ndarray
    shape: tuple | None = None
    periodic: tuple | None = None
    factors: tuple = ()

    @property
    def structured(self) -> bool:
        return self.shape is not None and len(self.factors) > 0


@dataclass(eq=False)
class SectionFrame:
    """Evaluations of a basis of holomorphic sections on a grid.

    Attributes
    ----------
    level_k : int
        Power of the polarization.
    dim : int
        Number of sections ``N+1``.
    grid : ChartGrid
    Z : ndarray, shape (P, N+1), complex
        Section values in the reference trivialization.
    dZ : ndarray, shape (P, n, N+1), complex
        Holomorphic chart derivatives of ``Z``.
    volume_V : float
        Volume of the level-one class, ``int omega^n`` with ``omega`` in ``2 pi c_1(L)``.
    weight_tags : ndarray of int, shape (N+1, r), optional
        Torus weights of the basis sections.
    K_ref : ndarray, optional
        Gram inverse of the reference metric used for potentials.
    kind : str
    """

    level_k: int
    dim: int
    grid: ChartGrid
    Z: np.ndarray
    dZ: np.ndarray
    volume_V: float = float("nan")
    weight_tags: np.ndarray | None = None
    K_ref: np.ndarray | None = None
    kind: str = "file"

    def __post_init__(self):
        self.Z = np.ascontiguousarray(self.Z, dtype=np.complex128)
        self.dZ = np.ascontiguousarray(self.dZ, dtype=np.complex128)
        if self.K_ref is None:
            self.K_ref = np.eye(self.dim, dtype=np.complex128)
        if self.weight_tags is not None:
            self.weight_tags = np.asarray(self.weight_tags, dtype=np.int64).reshape(self.dim, -1)

    @property
    def n_points(self) -> int:
        return self.Z.shape[0]

    @property
    def n(self) -> int:
        """Complex dimension of the manifold."""
        return self.dZ.shape[1]

    @cached_property
    def reference_kd(self) -> "KahlerData":
        return pullback_metric(self, self.K_ref)

    @cached_property
    def reference_potential(self) -> np.ndarray:
        return reference_potential(self)


@dataclass(eq=False)
class FiberMetric:
    """Hermitian metric on ``L^k``: the squared norm of the reference frame is ``exp(-phi)``."""

    phi: np.ndarray
    gauge_note: str = "phi is defined up to an additive constant"
    K: np.ndarray | None = None  # Gram inverse when phi is a Fubini-Study potential

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        if not np.all(np.isfinite(self.phi)):
            raise ValidationError("fiber potential must be finite everywhere")


class KahlerData:
    """Per-point Kahler metric data.

    Attributes
    ----------
    g : ndarray, shape (P, n, n), complex
        ``g[p, a, b] = g_{a bbar}`` in the holomorphic chart.
    detg : ndarray, shape (P,)
    vol_density : ndarray, shape (P,)
        ``omega^n`` per unit chart Lebesgue measure, ``n! 2^n det g``.
    level : int
        Level of the class of ``omega`` (``omega`` lies in ``2 pi level c_1(L)``).
    source : str
    """

    def __init__(self, frame, g, detg, source, G=None, scale=None):
        self.frame = frame
        self.g = g
        self.detg = detg
        n = g.shape[1]
        self.vol_density = math.factorial(n) * 2.0**n * detg
        self.level = frame.level_k
        self.source = source
        self._G = G
        self._scale = scale

    @property
    def n(self) -> int:
        return self.g.shape[1]

    @property
    def measure(self) -> np.ndarray:
        """Quadrature measure of ``omega^n``."""
        return self.vol_density * self.frame.grid.weights

    @property
    def unit_measure(self) -> np.ndarray:
        """Quadrature measure of ``(omega/level)^n``, which integrates to ``volume_V``."""
        return self.measure / float(self.level) ** self.n

    @property
    def volume(self) -> float:
        return float(np.sum(self.measure))

    def mean(self, f) -> float:
        m = self.measure
        return float(np.sum(f * m) / np.sum(m))

    @property
    def scale(self) -> np.ndarray:
        """Per-point round-sphere scale ``s_a`` with ``g_{a bbar} = s_a s_b G_{a bbar}``."""
        if self._scale is None:
            self._scale = _grid_ops(self.frame.grid).scale if self.frame.grid.structured else np.ones(
                (self.frame.n_points, self.n))
        return self._scale

    @property
    def G(self) -> np.ndarray:
        """Metric in the round-normalized frame (smooth across the poles)."""
        if self._G is None:
            s = self.scale
            self._G = self.g / (s[:, :, None] * s[:, None, :])
        return self._G

    @cached_property
    def scalar_curv(self) -> np.ndarray:
        if not self.frame.grid.structured:
            return np.full(self.frame.n_points, np.nan)
        return scalar_curvature(self)


# ---------------------------------------------------------------- grids and stencils


@lru_cache(maxsize=32)
def _sphere_nodes(n_theta, n_phi):
    x, wx = roots_legendre(n_theta)
    x, wx = x[::-1].copy(), wx[::-1].copy()  # theta ascending
    theta = np.arccos(x)
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    return x, wx, theta, phi


def _fornberg(z, x, m):
    """Finite-difference weights at ``z`` on nodes ``x`` for derivatives ``0..m``."""
    n = len(x)
    c = np.zeros((n, m + 1))
    c1, c4 = 1.0, x[0] - z
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, m)
        c2, c5, c4 = 1.0, c4, x[i] - z
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for d in range(mn, 0, -1):
                    c[i, d] = c1 * (d * c[i - 1, d - 1] - c5 * c[i - 1, d]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for d in range(mn, 0, -1):
                c[j, d] = (c4 * c[j, d] - d * c[j, d - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c


@lru_cache(maxsize=32)
def _theta_stencils(n_theta):
    # five-point stencils on theta nodes extended by reflection through both poles
    theta = _sphere_nodes(n_theta, 2)[2]
    ext = np.concatenate([[-theta[1], -theta[0]], theta,
                          [2 * np.pi - theta[-1], 2 * np.pi - theta[-2]]])
    w1 = np.empty((n_theta, 5))
    w2 = np.empty((n_theta, 5))
    for i in range(n_theta):
        c = _fornberg(theta[i], ext[i:i + 5], 2)
        w1[i], w2[i] = c[:, 1], c[:, 2]
    return w1, w2


class _GridOps:
    """Order-4 finite differences on a product of sphere grids (pole-crossing stencils)."""

    def __init__(self, grid: ChartGrid):
        self.grid = grid
        self.shape = grid.shape
        self.factors = grid.factors
        P = grid.weights.size
        n = len(self.factors)
        self.theta = [grid.params[:, 2 * a].reshape(self.shape) for a in range(n)]
        self.phi = [grid.params[:, 2 * a + 1].reshape(self.shape) for a in range(n)]
        self.scale = np.empty((P, n))
        for a in range(n):
            self.scale[:, a] = (0.5 * (1.0 + np.cos(self.theta[a]))).ravel()

    def _dtheta(self, f, a):
        fac = self.factors[a]
        ax_t, ax_p = 2 * a, 2 * a + 1
        half = fac.n_phi // 2
        ft = np.moveaxis(f, ax_t, 0)
        flip = lambda v: np.roll(v, half, axis=ax_p)
        ext = np.concatenate([flip(ft[1:2]), flip(ft[0:1]), ft,
                              flip(ft[-1:]), flip(ft[-2:-1])], axis=0)
        w1, w2 = _theta_stencils(fac.n_theta)
        n_t = fac.n_theta
        d1 = sum(w1[:, s].reshape((n_t,) + (1,) * (f.ndim - 1)) * ext[s:s + n_t] for s in range(5))
        d2 = sum(w2[:, s].reshape((n_t,) + (1,) * (f.ndim - 1)) * ext[s:s + n_t] for s in range(5))
        return np.moveaxis(d1, 0, ax_t), np.moveaxis(d2, 0, ax_t)

    def _dphi(self, f, a):
        ax = 2 * a + 1
        h = 2.0 * np.pi / self.factors[a].n_phi
        r = lambda s: np.roll(f, -s, axis=ax)
        fp1, fm1, fp2, fm2 = r(1), r(-1), r(2), r(-2)
        d1 = (-fp2 + 8.0 * fp1 - 8.0 * fm1 + fm2) / (12.0 * h)
        d2 = (-fp2 + 16.0 * fp1 - 30.0 * f + 16.0 * fm1 - fm2) / (12.0 * h * h)
        return d1, d2

    def _partials(self, f, a):
        ft, ftt = self._dtheta(f, a)
        fp, fpp = self._dphi(f, a)
        return ft, ftt, fp, fpp

    def d(self, f, a):
        """``D_a f = e^{-i phi}(d_theta - i csc(theta) d_phi) f``, the round-normalized d/dw."""
        ft, _ = self._dtheta(f, a)
        fp, _ = self._dphi(f, a)
        th, ph = self.theta[a], self.phi[a]
        return np.exp(-1j * ph) * (ft - 1j * fp / np.sin(th))

    def dbar(self, f, a):
        ft, _ = self._dtheta(f, a)
        fp, _ = self._dphi(f, a)
        th, ph = self.theta[a], self.phi[a]
        return np.exp(1j * ph) * (ft + 1j * fp / np.sin(th))

    def sphere_laplacian(self, f, a):
        ft, ftt, fp, fpp = self._partials(f, a)
        th = self.theta[a]
        s = np.sin(th)
        return ftt + np.cos(th) / s * ft + fpp / (s * s)

    def hessian(self, f):
        """Round-normalized complex Hessian ``d_a dbar_b f / (s_a s_b)`` of a real function."""
        f = np.asarray(f, dtype=np.float64).reshape(self.shape)
        n = len(self.factors)
        H = np.empty((f.size, n, n), dtype=np.complex128)
        for a in range(n):
            H[:, a, a] = self.sphere_laplacian(f, a).ravel()
        for b in range(n):
            fb = self.dbar(f, b)
            for a in range(b + 1, n):
                hab = self.d(fb, a).ravel()
                H[:, a, b] = hab
                H[:, b, a] = np.conj(hab)
        return H

    def grad(self, f):
        """Round-normalized ``(D_a f)`` and ``(Dbar_a f)`` arrays of shape (P, n)."""
        f = np.asarray(f).reshape(self.shape)
        n = len(self.factors)
        D = np.stack([self.d(f, a).ravel() for a in range(n)], axis=1)
        Db = np.stack([self.dbar(f, a).ravel() for a in range(n)], axis=1)
        return D, Db


_OPS_CACHE: dict = {}


def _grid_ops(grid: ChartGrid) -> _GridOps:
    if not grid.structured:
        raise ConfigError("finite-difference operators require a structured (tensor) grid")
    ops = _OPS_CACHE.get(id(grid))
    if ops is None or ops.grid is not grid:
        ops = _GridOps(grid)
        _OPS_CACHE[id(grid)] = ops
    return ops


# ---------------------------------------------------------------- backends


def _sphere_grid(n_theta, n_phi, level_k):
    x, wx, theta, phi = _sphere_nodes(n_theta, n_phi)
    T, Ph = np.meshgrid(theta, phi, indexing="ij")
    X = np.cos(T)
    params = np.stack([T.ravel(), Ph.ravel()], axis=1)
    weights = (np.outer(wx, np.full(n_phi, 2.0 * np.pi / n_phi)) / (1.0 + X) ** 2).ravel()
    w = (np.tan(T / 2.0) * np.exp(1j * Ph)).ravel()
    grid = ChartGrid(0, params, weights, (n_theta, n_phi), (False, True),
                     (SphereFactor(level_k, n_theta, n_phi),))
    return grid, w


def _check_resolution(level_k, n_theta, n_phi):
    if level_k < 1:
        raise ConfigError(f"level_k must be >= 1, got {level_k}")
    if n_theta < 16:
        raise ConfigError(f"n_theta={n_theta} below the minimum of 16")
    if n_phi < 2 * level_k + 2:
        raise ConfigError(
            f"n_phi={n_phi} below Nyquist for degree-{level_k} integrands (need >= {2 * level_k + 2})")
    if n_phi % 2:
        raise ConfigError("n_phi must be even (pole-crossing stencils pair phi with phi + pi)")


def default_grid(level_k: int) -> tuple[int, int]:
    """Default resolution: 64x128 up to k=8, 96x192 up to k=16, then proportional."""
    if level_k <= 8:
        return 64, 128
    if level_k <= 16:
        return 96, 192
    m = 6 * level_k
    return m, 2 * m


def build_p1_subsystem(exponents, n_theta=64, n_phi=128) -> SectionFrame:
    """Frame of monomial sections ``w^e`` for the given exponents on the Riemann sphere.

    The level is ``max(exponents)``; with ``exponents = range(k+1)`` this is the
    complete linear system of ``O(k)``.  Incomplete systems give singular images
    (e.g. ``(0, 2, 3)`` is a cuspidal cubic) and are used as unstable test configurations.
    """
    e = np.asarray(sorted(set(int(v) for v in exponents)), dtype=np.int64)
    if e.size < 2 or e[0] != 0:
        raise ConfigError("exponents must contain 0 and at least one positive power")
    k = int(e[-1])
    _check_resolution(k, n_theta, n_phi)
    grid, w = _sphere_grid(n_theta, n_phi, k)
    Z = w[:, None] ** e[None, :]
    dZ = (e[None, :] * w[:, None] ** np.maximum(e - 1, 0)[None, :])[:, None, :]
    K_ref = np.diag(comb(k, e).astype(np.complex128))
    frame = SectionFrame(k, int(e.size), grid, Z, dZ, weight_tags=e[:, None], K_ref=K_ref,
                         kind="p1" if e.size == k + 1 else "p1-subsystem")
    frame.volume_V = float(np.sum(frame.reference_kd.unit_measure))
    return frame


def build_p1_backend(level_k: int, n_theta: int | None = None, n_phi: int | None = None) -> SectionFrame:
    """Complete monomial frame of ``O(k)`` on the Riemann sphere.

    Parameters
    ----------
    level_k : int
        Degree ``k >= 1``.
    n_theta, n_phi : int, optional
        Gauss-Legendre nodes in ``cos(theta)`` and uniform nodes in ``phi``; default
        from :func:`default_grid`.

    Returns
    -------
    SectionFrame
        ``dim = k + 1``, torus weights ``j`` for ``w^j``, ``volume_V`` the computed
        area of the round metric (``2 pi``).
    """
    d_t, d_p = default_grid(level_k)
    n_theta = d_t if n_theta is None else int(n_theta)
    n_phi = d_p if n_phi is None else int(n_phi)
    _check_resolution(level_k, n_theta, n_phi)
    return build_p1_subsystem(range(level_k + 1), n_theta, n_phi)


def build_product_backend(frameA: SectionFrame, frameB: SectionFrame) -> SectionFrame:
    """Segre product frame: sections ``s_i t_j`` on the product grid."""
    for f in (frameA, frameB):
        if f.level_k < 1:
            raise ConfigError("product factor with level 0 is a degenerate polarization")
        if not f.grid.structured:
            raise ConfigError("products are supported for structured backends only")
    PA, PB = frameA.n_points, frameB.n_points
    nA, nB = frameA.n, frameB.n
    Z = np.einsum("pi,qj->pqij", frameA.Z, frameB.Z).reshape(PA * PB, -1)
    dZ = np.empty((PA, PB, nA + nB, frameA.dim, frameB.dim), dtype=np.complex128)
    dZ[:, :, :nA] = np.einsum("pai,qj->pqaij", frameA.dZ, frameB.Z)
    dZ[:, :, nA:] = np.einsum("pi,qaj->pqaij", frameA.Z, frameB.dZ)
    dZ = dZ.reshape(PA * PB, nA + nB, -1)
    params = np.concatenate([np.repeat(frameA.grid.params, PB, axis=0),
                             np.tile(frameB.grid.params, (PA, 1))], axis=1)
    weights = np.outer(frameA.grid.weights, frameB.grid.weights).ravel()
    grid = ChartGrid(0, params, weights, frameA.grid.shape + frameB.grid.shape,
                     frameA.grid.periodic + frameB.grid.periodic,
                     frameA.grid.factors + frameB.grid.factors)
    tags = None
    if frameA.weight_tags is not None and frameB.weight_tags is not None:
        ta, tb = frameA.weight_tags, frameB.weight_tags
        tags = np.concatenate([np.repeat(ta, tb.shape[0], axis=0), np.tile(tb, (ta.shape[0], 1))], axis=1)
    level = math.gcd(frameA.level_k, frameB.level_k)
    frame = SectionFrame(level, frameA.dim * frameB.dim, grid, Z, dZ, weight_tags=tags,
                         K_ref=np.kron(frameA.K_ref, frameB.K_ref), kind="product")
    frame.volume_V = float(np.sum(frame.reference_kd.unit_measure))
    return frame


# ---------------------------------------------------------------- sampled variety files


def _cplx(pairs, what, idx):
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.shape[-1] != 2:
        raise ValidationError(f"parse error: {what} entries must be [re, im] pairs (point {idx})")
    return arr[..., 0] + 1j * arr[..., 1]


def load_sampled_variety(path) -> SectionFrame:
    """Read a frame in the Sampled Variety JSON format and validate it."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"parse error: {exc}") from exc
    for key in ("level_k", "dim", "n_coords", "points", "volume_V"):
        if key not in doc:
            raise ValidationError(f"parse error: missing key '{key}'")
    dim, n = int(doc["dim"]), int(doc["n_coords"])
    pts = doc["points"]
    if not pts:
        raise ValidationError("parse error: no points")
    P = len(pts)
    Z = np.empty((P, dim), dtype=np.complex128)
    dZ = np.empty((P, n, dim), dtype=np.complex128)
    w = np.empty(P)
    params = []
    for i, pt in enumerate(pts):
        for key in ("weight", "z", "dz"):
            if key not in pt:
                raise ValidationError(f"parse error: point {i} lacks '{key}' (inconsistent point counts)")
        z = _cplx(pt["z"], "z", i)
        dz = _cplx(pt["dz"], "dz", i)
        if z.shape != (dim,) or dz.shape != (n, dim):
            raise ValidationError(f"parse error: point {i} has z/dz shapes {z.shape}/{dz.shape}, "
                                  f"expected ({dim},)/({n}, {dim})")
        Z[i], dZ[i], w[i] = z, dz, float(pt["weight"])
        params.append(pt.get("params", []))
    if np.any(w <= 0):
        raise ValidationError(f"weights must be positive (point {int(np.argmin(w))})")
    zero = np.flatnonzero(np.all(Z == 0, axis=1))
    if zero.size:
        raise ValidationError(f"zero section vector at point {int(zero[0])}")
    width = max((len(p) for p in params), default=0)
    par = np.full((P, width), np.nan)
    for i, p in enumerate(params):
        par[i, :len(p)] = p
    tags = doc.get("torus_weights")
    if tags is not None and len(tags) != dim:
        raise ValidationError(f"torus_weights has {len(tags)} rows, expected {dim}")
    grid = ChartGrid(0, par, w)
    return SectionFrame(int(doc["level_k"]), dim, grid, Z, dZ, volume_V=float(doc["volume_V"]),
                        weight_tags=None if tags is None else np.asarray(tags), kind="file")


def save_sampled_variety(frame: SectionFrame, path) -> None:
    """Write a frame in the Sampled Variety JSON format (floats round-trip exactly)."""
    pair = lambda a: np.stack([a.real, a.imag], axis=-1).tolist()
    pts = []
    zl, dzl = pair(frame.Z), pair(frame.dZ)
    for i in range(frame.n_points):
        pts.append({"params": frame.grid.params[i].tolist(), "weight": float(frame.grid.weights[i]),
                    "z": zl[i], "dz": dzl[i]})
    doc = {"level_k": frame.level_k, "dim": frame.dim, "n_coords": frame.n, "points": pts,
           "volume_V": frame.volume_V}
    if frame.weight_tags is not None:
        doc["torus_weights"] = frame.weight_tags.tolist()
    path = os.path.abspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path), suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


# ---------------------------------------------------------------- metrics


def frame_matrix(K) -> np.ndarray:
    """Matrix ``B`` with ``B^dagger B = K`` (upper Cholesky factor)."""
    K = np.asarray(K, dtype=np.complex128)
    try:
        return np.linalg.cholesky(K).conj().T
    except np.linalg.LinAlgError as exc:
        raise ConfigError("matrix is not positive definite") from exc


def transform_sections(frame: SectionFrame, B):
    """Section values and derivatives in the frame ``zhat = B z``."""
    Bt = np.asarray(B).T
    return frame.Z @ Bt, frame.dZ @ Bt


def _check_positive(g, detg):
    n = g.shape[1]
    if n == 1:
        bad = np.flatnonzero(~(g[:, 0, 0].real > 0))
    else:
        bad = np.flatnonzero(~(np.linalg.eigvalsh(g)[:, 0] > 0))
    if bad.size:
        raise DegenerateError("metric is not positive definite", int(bad[0]))


def fs_from_sections(frame, Zh, dZh, source="pullback"):
    """KahlerData of the Fubini-Study pullback for sections already in an orthonormal frame."""
    q, g, detg = kernels.fs_pointwise(Zh, dZh)
    zero = np.flatnonzero(~(q > 0))
    if zero.size:
        raise DegenerateError("zero section vector", int(zero[0]))
    _check_positive(g, detg)
    return KahlerData(frame, g, detg, source), q


def pullback_metric(frame: SectionFrame, K) -> KahlerData:
    """Fubini-Study metric pulled back by the embedding with Gram inverse ``K``.

    ``g_{a bbar} = d_a dbar_b log(z^dagger K z)``, computed in the rank-one projection
    form on sections transformed to a frame where ``K`` is the identity.
    """
    Zh, dZh = transform_sections(frame, frame_matrix(K))
    kd, _ = fs_from_sections(frame, Zh, dZh)
    return kd


def reference_potential(frame: SectionFrame) -> np.ndarray:
    """``log(z^dagger K_ref z)``: potential of the reference Fubini-Study metric."""
    Zh = frame.Z @ frame_matrix(frame.K_ref).T
    return np.log(np.einsum("pi,pi->p", Zh.conj(), Zh).real)


def potential_with_increment(frame: SectionFrame, u) -> FiberMetric:
    """Fiber metric whose potential is the reference one plus the global function ``u``."""
    return FiberMetric(frame.reference_potential + np.asarray(u, dtype=np.float64))


def metric_from_potential(frame: SectionFrame, h: FiberMetric) -> KahlerData:
    """Kahler metric ``i d dbar phi`` of a fiber potential.

    The potential is split as reference plus the global function
    ``u = phi - log(z^dagger K_ref z)``; the reference part is analytic and ``u`` is
    differentiated by order-4 stencils in the round-normalized frame.
    """
    ops = _grid_ops(frame.grid)
    ref = frame.reference_kd
    u = h.phi - frame.reference_potential
    u = u - np.mean(u)  # gauge: stencils see the same array for phi and phi + const
    G = ref.G + ops.hessian(u)
    s = ops.scale
    g = G * (s[:, :, None] * s[:, None, :])
    n = G.shape[1]
    if n == 1:
        detG = G[:, 0, 0].real
    else:
        detG = np.linalg.det(G).real
    detg = detG * np.prod(s * s, axis=1)
    try:
        _check_positive(G, detG)
    except DegenerateError as exc:
        raise DegenerateError("potential is not Kahler on the grid (indefinite metric)", exc.point) from None
    return KahlerData(frame, g, detg, "potential", G=G, scale=s)


def _conservative(kd, f):
    # remove the O(h^4) quadrature defect so that the divergence theorem holds exactly
    m = kd.measure
    return f - np.sum(f * m) / np.sum(m)


def laplacian(kd: KahlerData, f) -> np.ndarray:
    """``g^{a bbar} d_a dbar_b f`` by order-4 stencils (annihilates constants, integrates to zero)."""
    ops = _grid_ops(kd.frame.grid)
    Hn = ops.hessian(np.asarray(f, dtype=np.float64))
    Ginv = np.linalg.inv(kd.G)
    out = np.einsum("pba,pab->p", Ginv, Hn).real
    return _conservative(kd, out)


def scalar_curvature(kd: KahlerData) -> np.ndarray:
    """``-gamma_S g^{a bbar} d_a dbar_b log det g`` with the calibrated constant ``gamma_S``."""
    ops = _grid_ops(kd.frame.grid)
    G = kd.G
    n = G.shape[1]
    detG = G[:, 0, 0].real if n == 1 else np.linalg.det(G).real
    Hn = ops.hessian(np.log(detG)) - 2.0 * np.eye(n)[None]
    Ginv = np.linalg.inv(G)
    raw = -np.einsum("pba,pab->p", Ginv, Hn).real
    return load_calibration()["gamma_S"] * raw


def gradient_pairing(kd: KahlerData, f1, f2) -> np.ndarray:
    """``Re(g^{a bbar} d_a f1 dbar_b f2)`` for real functions."""
    ops = _grid_ops(kd.frame.grid)
    D1, _ = ops.grad(f1)
    _, Db2 = ops.grad(f2)
    Ginv = np.linalg.inv(kd.G)
    return np.einsum("pba,pa,pb->p", Ginv, D1, Db2).real


def torus_field(frame: SectionFrame, generator) -> np.ndarray:
    """Round-normalized holomorphic field ``s_a X^a`` of a torus generator.

    ``generator`` gives the rotation weight per sphere factor; the field is
    ``X = -i sum_a m_a w_a d/dw_a``.
    """
    ops = _grid_ops(frame.grid)
    m = np.asarray(generator, dtype=np.float64)
    out = np.zeros((frame.n_points, len(ops.factors)), dtype=np.complex128)
    for a in range(len(ops.factors)):
        th, ph = ops.theta[a].ravel(), ops.phi[a].ravel()
        out[:, a] = -1j * m[a] * 0.5 * np.sin(th) * np.exp(1j * ph)
    return out


def hamiltonian_residual(kd: KahlerData, H, generator) -> float:
    """Relative sup-norm of ``dbar H - i g(X, .)`` for the torus field of ``generator``."""
    ops = _grid_ops(kd.frame.grid)
    _, Db = ops.grad(H)
    X = torus_field(kd.frame, generator)
    target = 1j * np.einsum("pab,pa->pb", kd.G, X)
    return float(np.max(np.abs(Db - target)) / max(np.max(np.abs(target)), 1e-300))
