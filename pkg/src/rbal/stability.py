"""Energy profiles along one-parameter subgroups and stability diagnostics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .bergman import MomentData, moment_data, moment_data_frame, orthonormal_frame, _as_matrix
from .errors import ConfigError
from .geometry import KahlerData, SectionFrame
from .symmetry import WeightDecomposition, project_sT, project_VT, frobenius

T_GUARD = 5.0

__all__ = [
    "TangentSplit",
    "split_from_moment",
    "xi_split",
    "path_frame",
    "f_derivatives",
    "random_hermitian",
    "perp_basis",
    "eigenvalue_bound_report",
    "norm_bound_report",
    "distortion_report",
    "convexity_report",
    "Destabilizer",
    "destabilizer_scan",
]


@dataclass(eq=False)
class TangentSplit:
    """Fubini-Study decomposition of ``xi_A`` along the embedded manifold.

    Attributes
    ----------
    xi : ndarray, shape (P, N+1)
        Horizontal representative of ``xi_A`` at the unit section vector.
    tangential_coeffs : ndarray, shape (P, n)
        Coefficients of the tangential part against the chart frame ``dZ``.
    tangential, normal : ndarray, shape (P, N+1)
    total_norm2, tangential_norm2, normal_norm2 : ndarray, shape (P,)
        Pointwise squared FS norms.
    total_sq, tangential_sq, normal_sq : float
        ``int ||.||^2 (omega/k)^n``.
    """

    xi: np.ndarray
    tangential_coeffs: np.ndarray
    tangential: np.ndarray
    normal: np.ndarray
    total_norm2: np.ndarray
    tangential_norm2: np.ndarray
    normal_norm2: np.ndarray
    total_sq: float
    tangential_sq: float
    normal_sq: float

    @property
    def total_l2(self) -> float:
        return float(np.sqrt(self.total_sq))

    @property
    def normal_l2(self) -> float:
        return float(np.sqrt(self.normal_sq))


def split_from_moment(md: MomentData, A) -> TangentSplit:
    """Tangent/normal split of ``xi_A`` for the embedding described by ``md``.

    ``A`` acts on the section vectors of ``md``'s frame. The horizontal lift at the unit vector
    ``u`` is ``(I - u u^dagger) A u``; its FS norm equals the Euclidean norm there.
    """
    A = np.asarray(A, dtype=np.complex128)
    u = md.zhat
    sq = np.sqrt(md.q)[:, None, None]
    J = md.dzhat / sq  # (P, n, N+1): derivative rows per chart direction
    Au = u @ A.T
    xi = Au - np.einsum("pi,pi->p", u.conj(), Au)[:, None] * u
    PJ = J - np.einsum("pai,pi->pa", J, u.conj())[:, :, None] * u[:, None, :]
    gram = np.einsum("pai,pbi->pab", PJ.conj(), PJ)
    rhs = np.einsum("pai,pi->pa", PJ.conj(), xi)
    coeffs = np.linalg.solve(gram, rhs[:, :, None])[:, :, 0]
    tan = np.einsum("pa,pai->pi", coeffs, PJ)
    nor = xi - tan
    w = md.kd.unit_measure
    n_tot = np.einsum("pi,pi->p", xi.conj(), xi).real
    n_tan = np.einsum("pi,pi->p", tan.conj(), tan).real
    n_nor = np.einsum("pi,pi->p", nor.conj(), nor).real
    return TangentSplit(xi, coeffs, tan, nor, n_tot, n_tan, n_nor,
                        float(n_tot @ w), float(n_tan @ w), float(n_nor @ w))


def xi_split(frame: SectionFrame, H, A) -> TangentSplit:
    """Split of ``xi_A`` with ``A`` expressed in the Hilb-orthonormal frame of ``H``."""
    return split_from_moment(moment_data(frame, H), A)


def path_frame(H, A, t: float) -> np.ndarray:
    """Frame matrix ``exp(tA/2) L^{-1}`` of the point at time ``t`` on the path through ``H``.

    Along this path the Gram inverse in the starting orthonormal frame is ``exp(tA)``.
    """
    A = np.asarray(A, dtype=np.complex128)
    return expm(0.5 * t * A) @ orthonormal_frame(H)


def f_derivatives(frame: SectionFrame, H, A, t_grid):
    """Energy profile along the one-parameter subgroup generated by ``A``.

    Returns
    -------
    f_values, f_dot, f_ddot : ndarray
        ``f_dot(t) = tr(A mu_bar_t)``, ``f_ddot(t) = int ||pi_N xi_A||^2 (omega_t/k)^n``, and
        ``f`` integrated from ``f(0) = 0`` by the trapezoid rule.
    """
    t = np.asarray(t_grid, dtype=np.float64)
    if t.ndim != 1 or t.size == 0 or np.any(np.diff(t) <= 0) or not np.any(t == 0.0):
        raise ConfigError("t_grid must be strictly increasing and contain 0")
    A = np.asarray(A, dtype=np.complex128)
    A = 0.5 * (A + A.conj().T)
    opn = np.linalg.norm(A, 2)
    if np.max(np.abs(t)) * opn > T_GUARD:
        raise ConfigError(f"|t| * ||A||_op = {np.max(np.abs(t)) * opn:.3g} exceeds the range guard {T_GUARD}")
    B0 = orthonormal_frame(H)
    fd = np.empty(t.size)
    fdd = np.empty(t.size)
    for i, ti in enumerate(t):
        md = moment_data_frame(frame, expm(0.5 * ti * A) @ B0)
        fd[i] = frobenius(A, md.mu_bar)
        fdd[i] = split_from_moment(md, A).normal_sq
    i0 = int(np.flatnonzero(t == 0.0)[0])
    seg = 0.5 * (fd[1:] + fd[:-1]) * np.diff(t)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    return cum - cum[i0], fd, fdd


def random_hermitian(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Gaussian Hermitian matrix (GUE normalization)."""
    X = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    return 0.5 * (X + X.conj().T)


def _mu_offset(md):
    return float(np.linalg.norm(md.M, 2))


def eigenvalue_bound_report(frame: SectionFrame, H, wd: WeightDecomposition, basisVT,
                            samples: int = 50, seed: int = 0, md: MomentData | None = None) -> dict:
    """Empirical ``min k^2 ||pi_N xi_A||^2 / tr(A^2)`` over random ``A`` in ``V(T)^perp``.

    Squared norms use the level-one volume ``(omega/k)^n``.
    """
    if samples < 1:
        raise ConfigError("samples must be at least 1")
    md = moment_data(frame, H) if md is None else md
    rng = np.random.default_rng(seed)
    k = frame.level_k
    rows = []
    for s in range(samples):
        A = project_sT(random_hermitian(rng, frame.dim), wd)
        _, A = project_VT(A, basisVT)
        tr2 = frobenius(A, A)
        if tr2 < 1e-24:
            continue
        ratio = k**2 * split_from_moment(md, A).normal_sq / tr2
        rows.append((k, s, ratio))
    r = np.array([x[2] for x in rows])
    return {"k": k, "seed": seed, "samples": samples, "rows": rows,
            "min_ratio": float(r.min()) if r.size else float("nan"),
            "median_ratio": float(np.median(r)) if r.size else float("nan"),
            "exact_min_ratio": k**2 * _normal_form_min(md, perp_basis(wd, basisVT)),
            "mu_offset_op": _mu_offset(md)}


def perp_basis(wd: WeightDecomposition, basisVT) -> list:
    """Trace-orthonormal basis of the part of ``s_T`` orthogonal to ``V(T)``."""
    d = wd.dim
    gens = []
    for i in range(d):
        for j in range(i, d):
            if wd.index_to_block[i] != wd.index_to_block[j]:
                continue
            E = np.zeros((d, d), dtype=np.complex128)
            if i == j:
                E[i, i] = 1.0
                gens.append(E)
            else:
                E[i, j] = E[j, i] = 1.0
                gens.append(E)
                F = np.zeros((d, d), dtype=np.complex128)
                F[i, j], F[j, i] = 1j, -1j
                gens.append(F)
    proj = [project_VT(project_sT(E, wd), basisVT)[1] for E in gens]
    if not proj:
        return []
    vecs = np.array([np.concatenate([P.real.ravel(), P.imag.ravel()]) for P in proj])
    u, sv, vt = np.linalg.svd(vecs, full_matrices=False)
    rank = int(np.sum(sv > 1e-10 * sv[0])) if sv.size and sv[0] > 0 else 0
    out = []
    for v in vt[:rank]:
        M = (v[: d * d] + 1j * v[d * d:]).reshape(d, d)
        out.append(0.5 * (M + M.conj().T))
    return out


def _normal_form_min(md, basis) -> float:
    # smallest value of int ||pi_N xi_A||^2 / tr(A^2) over span(basis); trace Gram may differ from I
    if not basis:
        return float("nan")
    w = md.kd.unit_measure
    nor = [split_from_moment(md, A).normal for A in basis]
    Q = np.array([[float(np.einsum("pi,pi,p->", a.conj(), b, w).real) for b in nor] for a in nor])
    G = np.array([[frobenius(a, b) for b in basis] for a in basis])
    from scipy.linalg import eigh
    return float(eigh(0.5 * (Q + Q.T), 0.5 * (G + G.T), eigvals_only=True)[0])


def norm_bound_report(frame: SectionFrame, H, samples: int = 50, seed: int = 0,
                      md: MomentData | None = None) -> dict:
    """Empirical ``max tr(A^2) / (k ||xi_A||^2)`` over random traceless Hermitian ``A``."""
    if samples < 1:
        raise ConfigError("samples must be at least 1")
    md = moment_data(frame, H) if md is None else md
    rng = np.random.default_rng(seed)
    k = frame.level_k
    rows = []
    for s in range(samples):
        A = random_hermitian(rng, frame.dim)
        A -= np.trace(A).real / frame.dim * np.eye(frame.dim)
        ratio = frobenius(A, A) / (k * split_from_moment(md, A).total_sq)
        rows.append((k, s, ratio))
    r = np.array([x[2] for x in rows])
    return {"k": k, "seed": seed, "samples": samples, "rows": rows,
            "max_ratio": float(r.max()), "median_ratio": float(np.median(r)),
            "mu_offset_op": _mu_offset(md)}


def distortion_report(frame: SectionFrame, H, reference_kd: KahlerData, R_gate: float = 10.0) -> dict:
    """C0 comparison of the embedding metric with ``k`` times a reference metric.

    Pointwise generalized eigenvalues ``lambda`` of the embedding metric against
    ``k omega_0`` give ``R_lower = min lambda`` and ``R_upper = max |lambda - 1|``. On structured
    grids the sup of the round Laplacian of ``tr`` of the ratio is reported as a C2 indicator.
    """
    md = moment_data(frame, H)
    g = md.kd.g
    g0 = reference_kd.g * (frame.level_k / reference_kd.level)
    L = np.linalg.cholesky(g0)
    Li = np.linalg.inv(L)
    lam = np.linalg.eigvalsh(Li @ g @ Li.conj().transpose(0, 2, 1))
    lo, hi = float(lam.min()), float(lam.max())
    c2 = float("nan")
    if frame.grid.structured:
        from .geometry import _grid_ops
        ops = _grid_ops(frame.grid)
        tr = (lam.sum(axis=1) / lam.shape[1]).reshape(ops.shape)
        c2 = float(np.max(np.abs(sum(ops.sphere_laplacian(tr, a) for a in range(lam.shape[1])))))
    upper = float(np.max(np.abs(lam - 1.0)))
    return {"k": frame.level_k, "lambda_min": lo, "lambda_max": hi, "R_lower": lo,
            "R_upper": upper, "C2_estimate": c2, "R_gate": R_gate,
            "gate_pass": bool(lo >= 1.0 / R_gate and upper <= R_gate)}


def convexity_report(frame: SectionFrame, H, samples: int = 20, t_max: float = 1.0,
                     n_t: int = 11, seed: int = 0) -> dict:
    """Second derivative of the energy along random traceless directions (normalized to unit op norm)."""
    rng = np.random.default_rng(seed)
    t = np.linspace(-t_max, t_max, n_t)
    if not np.any(t == 0.0):
        t = np.sort(np.append(t, 0.0))
    rows = []
    for s in range(samples):
        A = random_hermitian(rng, frame.dim)
        A -= np.trace(A).real / frame.dim * np.eye(frame.dim)
        A /= np.linalg.norm(A, 2)
        _, _, fdd = f_derivatives(frame, H, A, t)
        rows.extend((frame.level_k, s, float(ti), float(v)) for ti, v in zip(t, fdd))
    vals = np.array([r[3] for r in rows])
    return {"k": frame.level_k, "seed": seed, "samples": samples, "rows": rows,
            "min_f_ddot": float(vals.min())}


@dataclass(eq=False)
class Destabilizer:
    """Direction along which the energy grows linearly.

    ``f(t) = slope * t + const`` with ``slope = tr(A mu_bar)``; ``t -> -infinity`` (or the
    direction ``-A``) makes the energy unbounded below.
    """

    A: np.ndarray
    slope: float
    tr_A2: float
    t_grid: np.ndarray
    f_values: np.ndarray
    f_dot: np.ndarray
    f_ddot: np.ndarray
    fit_residual: float
    certified: bool
    source: str = field(default="V(T) component")


def _certify(frame, H, A, source, t_span=1.0, n_t=9):
    opn = max(np.linalg.norm(A, 2), 1e-300)
    t = np.linspace(-t_span, t_span, n_t) * min(1.0, T_GUARD / (2 * opn))
    f, fd, fdd = f_derivatives(frame, H, A, t)
    coef = np.polyfit(t, f, 1)
    res = float(np.max(np.abs(np.polyval(coef, t) - f)))
    tr2 = frobenius(A, A)
    return Destabilizer(A, float(coef[0]), tr2, t, f, fd, fdd, res,
                        bool(np.max(fdd) <= 1e-8 * max(tr2, 1e-300)), source)


def destabilizer_scan(frame: SectionFrame, H, wd: WeightDecomposition, basisVT, budget: int = 8,
                      seed: int = 0, tol: float = 1e-8):
    """Look for a direction with vanishing second derivative and nonzero slope.

    The ``V(T)`` component of ``mu_bar - c I`` is tried first; then up to ``budget`` random
    combinations of ``basisVT``. Returns a :class:`Destabilizer` or ``None``.
    """
    if budget < 1:
        raise ConfigError("budget must be at least 1")
    md = moment_data(frame, H)
    scale = max(np.linalg.norm(md.mu_bar), 1e-300)
    A_vt, _ = project_VT(project_sT(md.M, wd), basisVT)
    if np.linalg.norm(A_vt) > tol * scale:
        return _certify(frame, H, A_vt, "V(T) component of mu_bar - cI")
    mats = [b.A if hasattr(b, "A") else np.asarray(b) for b in basisVT]
    if not mats:
        return None
    rng = np.random.default_rng(seed)
    for _ in range(budget):
        A = sum(c * m for c, m in zip(rng.normal(size=len(mats)), mats))
        if abs(frobenius(A, md.mu_bar)) > tol * scale * max(np.linalg.norm(A), 1e-300):
            return _certify(frame, H, A, "random V(T) direction")
    return None
