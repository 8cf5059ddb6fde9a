"""Torus weight decomposition, torus-commuting subspaces and Hamiltonian potentials."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ValidationError
from .geometry import KahlerData, SectionFrame, gradient_pairing

__all__ = [
    "WeightDecomposition",
    "HermitianDirection",
    "weight_blocks",
    "project_sT",
    "lie_rep",
    "torus_basis",
    "project_VT",
    "hamiltonian_potential",
    "hamiltonian_shift",
    "frobenius",
]


def frobenius(A, B) -> float:
    """Trace pairing ``tr(A B)`` of Hermitian matrices."""
    return float(np.einsum("ij,ji->", np.asarray(A), np.asarray(B)).real)


@dataclass(eq=False)
class WeightDecomposition:
    """Splitting of the section space into torus weight spaces.

    Attributes
    ----------
    raw_characters : ndarray, shape (blocks, r), int
        Distinct monomial weight vectors, lexicographically ordered.
    characters : ndarray, shape (blocks, r)
        The same shifted so that ``sum_i n_i chi_i = 0``.
    block_sizes : ndarray of int
    index_to_block : ndarray of int, shape (N+1,)
    centered_weights : ndarray, shape (N+1, r)
        Centered weight vector of every basis element.
    """

    raw_characters: np.ndarray
    characters: np.ndarray
    block_sizes: np.ndarray
    index_to_block: np.ndarray
    centered_weights: np.ndarray

    @property
    def torus_rank(self) -> int:
        return self.characters.shape[1]

    @property
    def dim(self) -> int:
        return self.index_to_block.size

    @property
    def block_mask(self) -> np.ndarray:
        b = self.index_to_block
        return b[:, None] == b[None, :]


def weight_blocks(frame: SectionFrame) -> WeightDecomposition:
    """Group basis sections by torus weight."""
    if frame.weight_tags is None:
        raise ConfigError("frame carries no torus weights; declare torus_weights for this geometry")
    W = np.asarray(frame.weight_tags, dtype=np.int64)
    chars, inv, sizes = np.unique(W, axis=0, return_inverse=True, return_counts=True)
    inv = np.asarray(inv).ravel()
    center = W.mean(axis=0)
    return WeightDecomposition(chars, chars - center, sizes, inv, W - center)


def project_sT(M, wd: WeightDecomposition) -> np.ndarray:
    """Frobenius-orthogonal projection onto block-diagonal traceless Hermitian matrices."""
    M = np.asarray(M, dtype=np.complex128)
    if M.shape != (wd.dim, wd.dim):
        raise ConfigError(f"matrix shape {M.shape} does not match dimension {wd.dim}")
    P = np.where(wd.block_mask, 0.5 * (M + M.conj().T), 0.0)
    return P - (np.trace(P).real / wd.dim) * np.eye(wd.dim)


@dataclass(eq=False)
class HermitianDirection:
    """Traceless Hermitian matrix with its subspace memberships."""

    A: np.ndarray
    in_sT: bool = False
    in_VT: bool = False
    in_VT_perp: bool = False
    label: str = ""

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.complex128)
        scale = max(1.0, float(np.abs(A).max()))
        if abs(np.trace(A)) > 1e-12 * scale * A.shape[0]:
            raise ValidationError("direction must be traceless")
        self.A = A

    @classmethod
    def classify(cls, A, wd: WeightDecomposition, basisVT, tol=1e-10, label=""):
        A = np.asarray(A, dtype=np.complex128)
        nrm = max(np.linalg.norm(A), 1e-300)
        in_sT = np.linalg.norm(A - project_sT(A, wd)) <= tol * nrm
        a_vt, a_perp = project_VT(A, basisVT)
        return cls(A, bool(in_sT), bool(np.linalg.norm(a_perp) <= tol * nrm),
                   bool(in_sT and np.linalg.norm(a_vt) <= tol * nrm), label)


def lie_rep(frame: SectionFrame, wd: WeightDecomposition, generator_index: int) -> HermitianDirection:
    """Centered diagonal weight matrix of torus generator ``generator_index``."""
    if not 0 <= generator_index < wd.torus_rank:
        raise ConfigError(f"generator index {generator_index} out of range (rank {wd.torus_rank})")
    A = np.diag(wd.centered_weights[:, generator_index]).astype(np.complex128)
    return HermitianDirection(A, in_sT=True, in_VT=True, in_VT_perp=False,
                              label=f"torus generator {generator_index}")


def torus_basis(frame: SectionFrame, wd: WeightDecomposition) -> list:
    """All torus generator representations (spanning V(T) on toric backends)."""
    return [lie_rep(frame, wd, i) for i in range(wd.torus_rank)]


def _as_mats(basis):
    return [b.A if isinstance(b, HermitianDirection) else np.asarray(b, dtype=np.complex128) for b in basis]


def project_VT(A, basisVT):
    """Split ``A`` into its trace-orthogonal components in and orthogonal to ``span(basisVT)``.

    Returns
    -------
    (A_VT, A_perp) : tuple of ndarray
    """
    A = np.asarray(A.A if isinstance(A, HermitianDirection) else A, dtype=np.complex128)
    mats = _as_mats(basisVT)
    if not mats:
        return np.zeros_like(A), A.copy()
    G = np.array([[frobenius(a, b) for b in mats] for a in mats])
    ev = np.linalg.eigvalsh(G)
    if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
        raise ConfigError("V(T) basis is rank deficient")
    coef = np.linalg.solve(G, np.array([frobenius(a, A) for a in mats]))
    A_vt = sum(c * a for c, a in zip(coef, mats))
    return A_vt, A - A_vt


def hamiltonian_potential(md, A, check_tangency: bool = True) -> np.ndarray:
    """Normalized Hamiltonian ``tr(mu A) - average`` on the embedding of ``md``.

    Parameters
    ----------
    md : MomentData
        Embedding data; averages use its pulled-back volume form.
    A : HermitianDirection or ndarray
    check_tangency : bool
        Warn if the induced field has a normal component above ``1e-6`` relative.
    """
    from .bergman import h_operator
    Am = A.A if isinstance(A, HermitianDirection) else np.asarray(A)
    Hf = h_operator(md, Am)
    Hf = Hf - md.kd.mean(Hf)
    if check_tangency and np.any(Am):
        from .stability import split_from_moment
        ts = split_from_moment(md, Am)
        if ts.normal_l2 > 1e-6 * max(ts.total_l2, 1e-300):
            warnings.warn(f"direction is not tangent to M: relative normal L2 norm "
                          f"{ts.normal_l2 / ts.total_l2:.3e}", stacklevel=2)
    return Hf


def hamiltonian_shift(kd: KahlerData, H, phi) -> np.ndarray:
    """Hamiltonian of the same torus field for the metric ``omega + i d dbar phi``.

    For torus-invariant ``phi`` the shift is ``Re(g^{a bbar} d_a H dbar_b phi)``; ``H`` must be
    the Hamiltonian with respect to ``kd`` and ``phi`` is in the units of ``kd``'s potential.
    """
    H = np.asarray(H, dtype=np.float64)
    return H + gradient_pairing(kd, H, phi)
