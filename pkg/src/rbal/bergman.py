"""Quantization maps between fiber metrics and inner products.

Conventions fixed library-wide:

* An inner product is its Gram matrix ``H = int z z^dagger`` in the reference basis,
  so ``H_ij = <s_i, s_j>``.
* The Hilb-orthonormal frame is ``zhat = B z`` with ``B = L^{-1}`` and ``H = L L^dagger``
  the lower Cholesky factorization; the Gram inverse is ``K = H^{-1} = B^dagger B``.
* Integrals over ``M`` use ``(omega/k)^n``, the level-one normalization, so that
  ``tr(mu_bar) = V`` for every embedding and balanced points have ``mu_bar = V/(N+1) I``.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConditioningError, ConfigError, ValidationError
from .geometry import (FiberMetric, KahlerData, SectionFrame, fs_from_sections, laplacian,
                       metric_from_potential, transform_sections, _grid_ops)

COND_LIMIT = 1e12

__all__ = [
    "InnerProduct",
    "MomentData",
    "Quantization",
    "orthonormal_gram_inverse",
    "orthonormal_frame",
    "fs",
    "hilb",
    "t_operator",
    "moment_data",
    "moment_data_frame",
    "bergman_density",
    "rho_tilde",
    "q_operator",
    "h_operator",
    "aubin_yau_directional",
    "energy_functional",
    "round_inner_product",
    "load_inner_product",
    "save_inner_product",
]


@dataclass(eq=False)
class InnerProduct:
    """Positive Hermitian Gram matrix on ``H^0(M, L^k)``."""

    H: np.ndarray
    level_k: int
    provenance: str = "initial"

    def __post_init__(self):
        H = np.asarray(self.H, dtype=np.complex128)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise ValidationError("inner product must be a square matrix")
        scale = max(np.abs(H).max(), 1e-300)
        if np.abs(H - H.conj().T).max() > 1e-14 * scale * H.shape[0]:
            raise ValidationError("inner product is not Hermitian")
        self.H = 0.5 * (H + H.conj().T)

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    @property
    def cond(self) -> float:
        ev = np.linalg.eigvalsh(self.H)
        return float(ev[-1] / ev[0]) if ev[0] > 0 else float("inf")

    def normalized(self) -> "InnerProduct":
        """Rescaled to unit determinant."""
        ld = np.linalg.slogdet(self.H)[1]
        return InnerProduct(self.H * math.exp(-ld / self.dim), self.level_k, self.provenance)


def _as_matrix(H):
    return H.H if isinstance(H, InnerProduct) else np.asarray(H, dtype=np.complex128)


def _check_conditioning(H):
    ev = np.linalg.eigvalsh(H)
    if not ev[0] > 0:
        raise ConditioningError("inner product is not positive definite")
    if ev[-1] / ev[0] > COND_LIMIT:
        raise ConditioningError(f"condition number {ev[-1] / ev[0]:.3e} exceeds {COND_LIMIT:.0e}")


def orthonormal_frame(H) -> np.ndarray:
    """``B = L^{-1}`` for the Cholesky factor ``H = L L^dagger``; ``zhat = B z`` is orthonormal."""
    Hm = _as_matrix(H)
    _check_conditioning(Hm)
    L = np.linalg.cholesky(Hm)
    return np.linalg.solve(L, np.eye(Hm.shape[0]))


def orthonormal_gram_inverse(H) -> np.ndarray:
    """Gram inverse ``K = H^{-1} = B^dagger B``; the FS potential is ``log(z^dagger K z)``."""
    B = orthonormal_frame(H)
    K = B.conj().T @ B
    return 0.5 * (K + K.conj().T)


def round_inner_product(level_k: int) -> InnerProduct:
    """``diag(1/C(k, j))``: Hilb of the round metric on the sphere."""
    from scipy.special import comb
    return InnerProduct(np.diag(1.0 / comb(level_k, np.arange(level_k + 1))), level_k, "round")


# ---------------------------------------------------------------- FS side


@dataclass(eq=False)
class MomentData:
    """Moment map data of an embedding.

    Attributes
    ----------
    zhat : ndarray, shape (P, N+1)
        Unit section vectors; the pointwise moment matrix is ``zhat zhat^dagger``.
    mu_bar : ndarray
        ``int mu (omega_FS/k)^n``.
    c_value : float
        ``tr(mu_bar)/(N+1)``.
    M : ndarray
        Traceless part, ``mu_bar = c_value I + M``.
    kd : KahlerData
        Pulled-back Fubini-Study metric.
    B : ndarray
        Frame matrix used (``zhat ~ B z``).
    """

    zhat: np.ndarray
    mu_bar: np.ndarray
    c_value: float
    M: np.ndarray
    kd: KahlerData
    B: np.ndarray
    q: np.ndarray = field(repr=False, default=None)
    dzhat: np.ndarray = field(repr=False, default=None)

    @property
    def D(self) -> float:
        return self.c_value

    def mu_pointwise(self, idx=None) -> np.ndarray:
        """Rank-one moment matrices at the requested points (all points if ``idx`` is None)."""
        z = self.zhat if idx is None else self.zhat[np.atleast_1d(idx)]
        return z[:, :, None] * z.conj()[:, None, :]


def moment_data_frame(frame: SectionFrame, B) -> MomentData:
    """Moment data for the embedding ``p -> [B z(p)]``."""
    Zh, dZh = transform_sections(frame, B)
    kd, q = fs_from_sections(frame, Zh, dZh)
    c = kd.unit_measure / q
    mu_bar = kernels.moment_sum(Zh, c)
    mu_bar = 0.5 * (mu_bar + mu_bar.conj().T)
    N1 = frame.dim
    cv = float(np.trace(mu_bar).real / N1)
    return MomentData(Zh / np.sqrt(q)[:, None], mu_bar, cv, mu_bar - cv * np.eye(N1), kd,
                      np.asarray(B), q, dZh)


def moment_data(frame: SectionFrame, H) -> MomentData:
    """Moment data in the Hilb-orthonormal frame of ``H``."""
    return moment_data_frame(frame, orthonormal_frame(H))


def fs(frame: SectionFrame, H) -> FiberMetric:
    """``FS_k(H)``: potential ``log(z^dagger K z)``; the orthonormal sections have unit pointwise sum."""
    K = orthonormal_gram_inverse(H)
    Zh, _ = transform_sections(frame, orthonormal_frame(H))
    return FiberMetric(np.log(np.einsum("pi,pi->p", Zh.conj(), Zh).real), K=K)


def _kahler_data(frame: SectionFrame, h: FiberMetric) -> KahlerData:
    K = h.K
    if K is not None:
        from .geometry import pullback_metric
        return pullback_metric(frame, K)
    return metric_from_potential(frame, h)


class Quantization:
    """Hilb data of a fixed fiber metric, reused by ``hilb``, ``q_operator`` and densities.

    Parameters
    ----------
    frame : SectionFrame
    h : FiberMetric
        Potential on ``L^k``.
    kd : KahlerData, optional
        Metric of ``h``; computed analytically for FS potentials, else by stencils.
    """

    def __init__(self, frame: SectionFrame, h: FiberMetric, kd: KahlerData | None = None):
        self.frame = frame
        self.h = h
        self.kd = _kahler_data(frame, h) if kd is None else kd
        shift = float(np.min(h.phi))
        self.c = np.exp(-(h.phi - shift)) * self.kd.unit_measure
        N1, V = frame.dim, frame.volume_V
        G = kernels.moment_sum(frame.Z, self.c)
        self.H = (N1 / V) * math.exp(-shift) * 0.5 * (G + G.conj().T)
        self._shift = shift
        self._B = None
        self._Zh = None

    @property
    def inner_product(self) -> InnerProduct:
        return InnerProduct(self.H, self.frame.level_k, "hilb")

    @property
    def B(self):
        if self._B is None:
            self._B = orthonormal_frame(self.H)
        return self._B

    @property
    def Zh(self):
        if self._Zh is None:
            self._Zh = self.frame.Z @ self.B.T
        return self._Zh

    def density(self) -> np.ndarray:
        """``rho_k = sum_i |shat_i|^2_{h^k}`` for the Hilb-orthonormal basis."""
        q = np.einsum("pi,pi->p", self.Zh.conj(), self.Zh).real
        return q * np.exp(-self.h.phi)

    def q(self, f) -> np.ndarray:
        """``(Q_k f)_ij = int f <shat_i, shat_j>_{h^k} (omega/k)^n``."""
        f = np.asarray(f, dtype=np.float64)
        Q = kernels.moment_sum(self.Zh, f * self.c) * math.exp(-self._shift)
        return 0.5 * (Q + Q.conj().T)

    def q_hat(self, f) -> np.ndarray:
        """``Q_k`` rescaled by ``(N+1)/V`` so that ``Q_hat(1) = I``."""
        return (self.frame.dim / self.frame.volume_V) * self.q(f)

    def moment(self) -> MomentData:
        """Moment data of ``FS(Hilb(h))`` in this Hilb-orthonormal frame."""
        return moment_data_frame(self.frame, self.B)


def hilb(frame: SectionFrame, h: FiberMetric) -> InnerProduct:
    """``Hilb_k(h)_ij = (N+1)/V int <s_i, s_j>_{h^k} (omega_h/k)^n``."""
    return Quantization(frame, h).inner_product


def t_operator(frame: SectionFrame, H) -> InnerProduct:
    """``T(H) = Hilb_k(FS_k(H))`` evaluated analytically as ``(N+1)/V L mu_bar L^dagger``."""
    md = moment_data(frame, H)
    return _t_from_moment(frame, md)


def _t_from_moment(frame, md):
    Linv = md.B
    T = np.linalg.solve(Linv, np.linalg.solve(Linv, md.mu_bar).conj().T).conj().T
    T = (frame.dim / frame.volume_V) * T
    return InnerProduct(0.5 * (T + T.conj().T), frame.level_k, "hilb")


def bergman_density(frame: SectionFrame, h: FiberMetric) -> np.ndarray:
    """Bergman density ``sum_i |shat_i|^2_{h^k}`` with ``shat`` orthonormal for ``Hilb_k(h)``."""
    return Quantization(frame, h).density()


def rr_factor(frame: SectionFrame) -> float:
    """``(N+1) (2 pi)^n n! / V``: converts the Hilb-normalized density to the one with leading term ``k^n``."""
    n = frame.n
    return frame.dim * (2.0 * np.pi) ** n * math.factorial(n) / frame.volume_V


def rho_tilde(frame: SectionFrame, h: FiberMetric, level_k: int | None = None,
              quant: Quantization | None = None) -> np.ndarray:
    """Volume-corrected density ``(k^n/rho)(omega + k^{-1} i d dbar log rho)^n / omega^n``.

    ``rho`` is the Bergman density normalized so that its leading term is ``k^n``.
    """
    k = frame.level_k if level_k is None else int(level_k)
    qz = Quantization(frame, h) if quant is None else quant
    rho = qz.density() * rr_factor(frame)
    ops = _grid_ops(frame.grid)
    kd = qz.kd
    # in level-k units: omega_k + i d dbar log rho versus omega_k
    G = kd.G
    Gc = G + ops.hessian(np.log(rho)) * (k / frame.level_k)
    n = G.shape[1]
    if n == 1:
        ratio = Gc[:, 0, 0].real / G[:, 0, 0].real
        ok = Gc[:, 0, 0].real > 0
    else:
        ratio = np.linalg.det(Gc).real / np.linalg.det(G).real
        ok = np.linalg.eigvalsh(Gc)[:, 0] > 0
    if not np.all(ok):
        raise ConfigError(f"corrected form is not positive at point {int(np.flatnonzero(~ok)[0])}")
    return (float(k) ** n / rho) * ratio


def q_operator(frame: SectionFrame, h: FiberMetric, f) -> np.ndarray:
    """``Q_k(f)`` in the Hilb_k(h)-orthonormal basis (level-one volume normalization)."""
    return Quantization(frame, h).q(f)


def h_operator(md: MomentData, A) -> np.ndarray:
    """``H_k(A) = tr(mu A)`` at every point."""
    A = np.asarray(A)
    if A.shape != (md.zhat.shape[1],) * 2:
        raise ConfigError(f"matrix shape {A.shape} does not match dimension {md.zhat.shape[1]}")
    z = md.zhat
    return np.einsum("pi,ij,pj->p", z.conj(), A, z).real


def aubin_yau_directional(frame: SectionFrame, H, dH, md: MomentData | None = None) -> float:
    """Derivative of the energy functional along the direction ``dH``: ``tr(dH mu_bar)``.

    The one-parameter family is the one moving orthonormal section vectors by
    ``exp(t dH / 2)``, i.e. the Gram inverse becomes ``exp(t dH)`` in the orthonormal frame.
    """
    if md is None:
        md = moment_data(frame, H)
    return float(np.trace(np.asarray(dH) @ md.mu_bar).real)


def _mixed_volumes(g1, g0):
    # [s^j] det(s g1 + g0) for j = 0..n, per point
    n = g1.shape[1]
    if n == 1:
        return np.stack([g0[:, 0, 0].real, g1[:, 0, 0].real], axis=1)
    s = np.arange(n + 1, dtype=float)
    vals = np.stack([np.linalg.det(sj * g1 + g0).real for sj in s], axis=1)
    return np.linalg.solve(np.vander(s, increasing=True), vals.T).T


def energy_functional(frame: SectionFrame, H, md: MomentData | None = None) -> float:
    """Monge-Ampere energy of ``FS(H)`` relative to the reference metric.

    ``E = 1/(n+1) sum_j int u omega_u^j ^ omega_0^(n-j) / k^n`` with
    ``u = log(z^dagger K z) - log(z^dagger K_ref z)``; its derivative along the family
    of :func:`aubin_yau_directional` is ``tr(dH mu_bar)``.
    """
    if md is None:
        md = moment_data(frame, H)
    ref = frame.reference_kd
    q = np.einsum("pi,pi->p", (frame.Z @ md.B.T).conj(), frame.Z @ md.B.T).real
    u = np.log(q) - frame.reference_potential
    n = frame.n
    from scipy.special import comb
    mv = _mixed_volumes(md.kd.g, ref.g)
    dens = sum(mv[:, j] / comb(n, j) for j in range(n + 1)) / (n + 1)
    vol = math.factorial(n) * 2.0**n * dens * frame.grid.weights / float(frame.level_k) ** n
    return float(np.sum(u * vol))


# ---------------------------------------------------------------- persistence


def save_inner_product(H: InnerProduct, path, extra: dict | None = None) -> None:
    """Write ``{"level_k", "dim", "entries"}`` with exactly round-tripping floats (atomic)."""
    Hm = H.H
    doc = {"level_k": int(H.level_k), "dim": int(Hm.shape[0]),
           "entries": np.stack([Hm.real, Hm.imag], axis=-1).tolist()}
    if extra:
        doc.update(extra)
    atomic_write_json(path, doc)


def load_inner_product(path) -> InnerProduct:
    try:
        with open(path) as fh:
            doc = json.load(fh)
        arr = np.asarray(doc["entries"], dtype=np.float64)
        dim = int(doc["dim"])
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ValidationError(f"parse error: {exc}") from exc
    if arr.shape != (dim, dim, 2):
        raise ValidationError(f"entries shape {arr.shape} does not match dim {dim}")
    return InnerProduct(arr[..., 0] + 1j * arr[..., 1], int(doc["level_k"]), "file")


def atomic_write_json(path, doc) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(doc, fh, indent=1)
    os.replace(tmp, path)
