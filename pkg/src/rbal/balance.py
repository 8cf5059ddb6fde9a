"""Balanced and relatively balanced embeddings: residuals, solvers and torus orbit matching."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.optimize import least_squares

from .bergman import (InnerProduct, MomentData, _as_matrix, _t_from_moment, energy_functional,
                      moment_data)
from .errors import ConditioningError, ConfigError, DegenerateError
from .geometry import SectionFrame
from .symmetry import WeightDecomposition, project_sT, project_VT

log = logging.getLogger(__name__)

ARMIJO_SLOPE = 1e-4
BACKTRACK = 0.5
MAX_BACKTRACK = 80
ZERO_CUTOFF = 1e-14
NOISE = 1e-12
WARM_FACTOR = 4.0

__all__ = [
    "SolveOptions",
    "SolveReport",
    "balanced_residual",
    "relative_residual",
    "off_sT_residual",
    "objective",
    "solve_balanced",
    "solve_relative",
    "torus_translate",
    "orbit_match",
    "random_inner_product",
]


@dataclass
class SolveOptions:
    tol: float = 1e-10
    max_iter: int = 2000
    mode: str = "titer"

    def __post_init__(self):
        if self.mode not in ("titer", "descent"):
            raise ConfigError(f"unknown solver mode {self.mode!r}")
        if not self.tol > 0 or self.max_iter < 0:
            raise ConfigError("tol must be positive and max_iter non-negative")


@dataclass(eq=False)
class SolveReport:
    """Outcome of a solver run.

    Attributes
    ----------
    iterates : int
        Accepted updates performed.
    residual_history : list of (int, float, float)
        ``(iteration, balanced_residual, relative_residual)`` for every visited iterate.
    final : InnerProduct
    B_matrix : ndarray
        ``V(T)`` component of ``mu_bar - c I`` at the last iterate (zero when no torus is given).
    status : str
        ``"converged"``, ``"max-iter"`` or ``"diverged"``.
    """

    iterates: int
    residual_history: list
    final: InnerProduct
    B_matrix: np.ndarray
    status: str
    c_value: float = float("nan")
    mode: str = "titer"
    message: str = ""
    moment: MomentData | None = field(default=None, repr=False)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def to_dict(self) -> dict:
        B = self.B_matrix
        return {"status": self.status, "mode": self.mode, "iterates": self.iterates,
                "message": self.message, "c_value": self.c_value,
                "final_balanced_residual": self.residual_history[-1][1] if self.residual_history else None,
                "final_relative_residual": self.residual_history[-1][2] if self.residual_history else None,
                "residual_history": [list(r) for r in self.residual_history],
                "B_matrix": np.stack([B.real, B.imag], axis=-1).tolist()}


def balanced_residual(md: MomentData) -> float:
    """``||mu_bar - c I||_F / ||mu_bar||_F``."""
    return float(np.linalg.norm(md.M) / np.linalg.norm(md.mu_bar))


def _rel_parts(md, wd, basisVT):
    S = project_sT(md.M, wd)
    A_vt, A_perp = project_VT(S, basisVT)
    return S, A_vt, A_perp


def relative_residual(md: MomentData, wd: WeightDecomposition, basisVT) -> float:
    """``||P_perp(P_sT(mu_bar - c I))||_F / ||mu_bar||_F``."""
    _, _, A_perp = _rel_parts(md, wd, basisVT)
    return float(np.linalg.norm(A_perp) / np.linalg.norm(md.mu_bar))


def off_sT_residual(md: MomentData, wd: WeightDecomposition) -> float:
    """Relative size of the part of ``mu_bar`` outside the torus centralizer."""
    off = np.where(wd.block_mask, 0.0, md.mu_bar)
    return float(np.linalg.norm(off) / np.linalg.norm(md.mu_bar))


def objective(frame: SectionFrame, H, md: MomentData | None = None) -> float:
    """Energy plus ``(V/(N+1)) log det H``; invariant under scaling of ``H``.

    Its derivative along ``K_t = exp(tA)`` (orthonormal frame) is ``tr(A (mu_bar - c I))``.
    """
    Hm = _as_matrix(H)
    md = moment_data(frame, Hm) if md is None else md
    c = frame.volume_V / frame.dim
    return energy_functional(frame, Hm, md) + c * np.linalg.slogdet(Hm)[1]


def _unit_det(H):
    ld = np.linalg.slogdet(H)[1]
    H = H * math.exp(-ld / H.shape[0])
    return 0.5 * (H + H.conj().T)


def _step(H, B, P, eta):
    # sections zhat -> exp(-eta P) zhat, i.e. H -> L exp(2 eta P) L^dagger
    L = np.linalg.inv(B)
    return _unit_det(L @ expm(2.0 * eta * P) @ L.conj().T)


def _residuals(md, wd, basisVT):
    rb = balanced_residual(md)
    rr = relative_residual(md, wd, basisVT) if wd is not None else float("nan")
    return rb, rr


def _check_start(frame, H0):
    H = _as_matrix(H0)
    if H.shape != (frame.dim, frame.dim):
        raise ConfigError(f"inner product dimension {H.shape[0]} does not match frame dimension {frame.dim}")
    return _unit_det(H)


def _hygiene(P):
    P = np.where(np.abs(P) < ZERO_CUTOFF, 0.0, P)
    return 0.5 * (P + P.conj().T)


def _descent(frame, H, direction, residual, opts, wd, basisVT, relative):
    k = frame.level_k
    md = moment_data(frame, H)
    F = objective(frame, H, md)
    history = [(0, *_residuals(md, wd, basisVT))]
    it = 0
    status = "max-iter"
    msg = ""
    last_eta = None
    while True:
        r = residual(md)
        if r < opts.tol:
            status = "converged"
            break
        if it >= opts.max_iter:
            break
        P = _hygiene(direction(md))
        pn2 = float(np.linalg.norm(P) ** 2)
        if pn2 == 0.0:
            status = "converged"
            break
        eta = 1.0 / (k * np.linalg.norm(P, 2))
        if last_eta is not None:
            # warm start: the full-length trial step is far too long near convergence
            eta = min(eta, WARM_FACTOR * last_eta)
        # derivative of the objective along eta is -2 tr(P (mu_bar - cI)) = -2 ||P||^2
        accepted = False
        for _ in range(MAX_BACKTRACK):
            Hn = _step(H, md.B, P, eta)
            mdn = moment_data(frame, Hn)
            Fn = objective(frame, Hn, mdn)
            predicted = ARMIJO_SLOPE * eta * 2.0 * pn2
            if predicted < NOISE * max(1.0, abs(F)):
                # objective differences are below rounding; require residual decrease instead
                accepted = residual(mdn) < r
            else:
                accepted = Fn <= F - predicted
                if accepted:
                    # keeps recorded residuals monotone; convexity makes short steps pass
                    accepted = residual(mdn) <= r
            if accepted:
                break
            eta *= BACKTRACK
        if not accepted:
            status, msg = "diverged", "line search failed"
            break
        H, md, F = Hn, mdn, Fn
        last_eta = eta
        it += 1
        history.append((it, *_residuals(md, wd, basisVT)))
    return H, md, it, history, status, msg


def _titer(frame, H, opts, wd, basisVT):
    md = moment_data(frame, H)
    history = [(0, *_residuals(md, wd, basisVT))]
    it = 0
    status = "max-iter"
    while True:
        if balanced_residual(md) < opts.tol:
            status = "converged"
            break
        if it >= opts.max_iter:
            break
        H = _unit_det(_t_from_moment(frame, md).H)
        md = moment_data(frame, H)
        it += 1
        history.append((it, *_residuals(md, wd, basisVT)))
    return H, md, it, history, status, ""


def _run(frame, H0, opts, wd, basisVT, relative):
    opts = opts or SolveOptions()
    if isinstance(opts, dict):
        opts = SolveOptions(**opts)
    H = _check_start(frame, H0)
    try:
        if relative:
            def direction(md):
                return _rel_parts(md, wd, basisVT)[2]
            H, md, it, hist, status, msg = _descent(
                frame, H, direction, lambda md: relative_residual(md, wd, basisVT), opts, wd, basisVT, True)
        elif opts.mode == "titer":
            H, md, it, hist, status, msg = _titer(frame, H, opts, wd, basisVT)
        else:
            H, md, it, hist, status, msg = _descent(
                frame, H, lambda md: md.M, balanced_residual, opts, wd, basisVT, False)
    except (ConditioningError, DegenerateError) as exc:
        empty = np.zeros((frame.dim, frame.dim), dtype=np.complex128)
        return SolveReport(0, [], InnerProduct(H, frame.level_k, "solver iterate"), empty, "diverged",
                           mode="descent" if relative else opts.mode, message=str(exc))
    if wd is not None:
        B = _rel_parts(md, wd, basisVT)[1]
    else:
        B = np.zeros_like(md.M)
    return SolveReport(it, hist, InnerProduct(H, frame.level_k, "solver iterate"), B, status,
                       md.c_value, "descent" if relative else opts.mode, msg, md)


def solve_balanced(frame: SectionFrame, H0, opts: SolveOptions | dict | None = None,
                   wd: WeightDecomposition | None = None, basisVT=()) -> SolveReport:
    """Find ``H`` with ``mu_bar`` proportional to the identity.

    ``mode="titer"`` iterates ``H <- T(H)``; ``mode="descent"`` takes Armijo-controlled steps
    ``zhat <- exp(-eta P) zhat`` with ``P = mu_bar - c I``. Iterates are normalized to unit
    determinant. ``wd`` and ``basisVT`` only feed the relative residual column of the history.
    """
    return _run(frame, H0, opts, wd, basisVT, relative=False)


def solve_relative(frame: SectionFrame, H0, wd: WeightDecomposition, basisVT,
                   opts: SolveOptions | dict | None = None) -> SolveReport:
    """Projected descent to a relatively balanced ``H``.

    ``H0`` must commute with the torus (block diagonal in the weight decomposition), so that
    the Hilb-orthonormal frame stays adapted to the weight spaces along the iteration.
    """
    H = _as_matrix(H0)
    off = np.where(wd.block_mask, 0.0, H)
    if np.linalg.norm(off) > 1e-12 * np.linalg.norm(H):
        raise ConfigError("relative solver needs a torus-invariant (block-diagonal) starting inner product")
    return _run(frame, H, opts, wd, basisVT, relative=True)


def random_inner_product(rng: np.random.Generator, dim: int, wd: WeightDecomposition | None = None,
                         spread: float = 1.0) -> np.ndarray:
    """Random positive Hermitian start ``X X^dagger / dim + 0.1 I`` with unit determinant.

    With ``wd`` the off-block entries are dropped, which keeps the matrix positive and
    makes it torus invariant.
    """
    X = spread * (rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim)))
    H = X @ X.conj().T / dim + 0.1 * np.eye(dim)
    if wd is not None:
        H = np.where(wd.block_mask, H, 0.0)
    return _unit_det(H)


def torus_translate(H, basisVT, t) -> np.ndarray:
    """Gram matrix of the sections moved by ``exp(sum_i t_i A_i)``."""
    Hm = _as_matrix(H)
    mats = [b.A if hasattr(b, "A") else np.asarray(b) for b in basisVT]
    X = sum((ti * m for ti, m in zip(np.atleast_1d(t), mats)), np.zeros_like(Hm))
    E = expm(X)
    return E @ Hm @ E.conj().T


def _log_residual(H1, H2):
    # log of the congruence L2^-1 H1 L2^-dagger with the scale direction removed
    L = np.linalg.cholesky(H2)
    Li = np.linalg.inv(L)
    w, V = np.linalg.eigh(Li @ H1 @ Li.conj().T)
    lg = np.log(w)
    lg = lg - lg.mean()
    return (V * lg) @ V.conj().T


def _spectral_distance(H1, H2):
    return float(np.linalg.norm(_log_residual(H1, H2)))


def orbit_match(frame: SectionFrame, H1, H2, wd: WeightDecomposition, basisVT=None):
    """Torus parameters moving ``H1`` closest to ``H2``.

    The distance is the affine-invariant one, ``||log eig(H2^{-1} H1_t)||`` with the scale
    direction removed.

    Returns
    -------
    (t, distance) : tuple of ndarray and float
    """
    from .symmetry import torus_basis
    basis = torus_basis(frame, wd) if basisVT is None else basisVT
    H1m, H2m = _as_matrix(H1), _as_matrix(H2)
    if not basis:
        return np.zeros(0), _spectral_distance(H1m, H2m)

    def fun(t):
        R = _log_residual(torus_translate(H1m, basis, t), H2m).ravel()
        return np.concatenate([R.real, R.imag])

    res = least_squares(fun, np.zeros(len(basis)), method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    t = np.asarray(res.x)
    dist = _spectral_distance(torus_translate(H1m, basis, t), H2m)
    if not res.success and dist > 1e-6:
        warnings.warn(f"orbit matching did not converge: {res.message}", stacklevel=2)
    return t, dist
