"""Pure numpy implementations of the per-point Fubini-Study kernels."""
import numpy as np


def fs_pointwise(Zh, dZh):
    """Pulled-back Fubini-Study data at every sample point.

    Parameters
    ----------
    Zh : ndarray, shape (P, N+1), complex
        Section values in a frame where the Gram inverse is the identity.
    dZh : ndarray, shape (P, n, N+1), complex
        Holomorphic chart derivatives of ``Zh``.

    Returns
    -------
    q : ndarray, shape (P,)
        Squared norms ``|z|^2``.
    g : ndarray, shape (P, n, n)
        ``g[p, a, b] = d_a dbar_b log |z|^2``.
    detg : ndarray, shape (P,)
        Real determinant of ``g``.
    """
    q = np.einsum("pi,pi->p", Zh.conj(), Zh).real
    v = np.einsum("pi,pai->pa", Zh.conj(), dZh)
    gram = np.einsum("pai,pbi->pab", dZh, dZh.conj())
    g = (gram * q[:, None, None] - v[:, :, None] * v.conj()[:, None, :]) / (q * q)[:, None, None]
    n = g.shape[1]
    if n == 1:
        detg = g[:, 0, 0].real.copy()
    elif n == 2:
        detg = (g[:, 0, 0] * g[:, 1, 1]).real - np.abs(g[:, 0, 1]) ** 2
    else:
        detg = np.linalg.det(g).real
    return q, g, detg


def moment_sum(Zh, c):
    """Weighted outer-product sum ``sum_p c_p z_p z_p^dagger``."""
    return (Zh.T * c) @ Zh.conj()
