# Compiled per-point Fubini-Study kernels; same contracts as _fallback.
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


cdef double _hermitian_det(double complex* a, int n) noexcept nogil:
    # Gaussian elimination without pivoting; a is positive definite in practice.
    cdef int i, j, r
    cdef double complex piv, f
    cdef double det = 1.0
    for i in range(n):
        piv = a[i * n + i]
        if piv.real == 0.0 and piv.imag == 0.0:
            return 0.0
        det *= piv.real
        for r in range(i + 1, n):
            f = a[r * n + i] / piv
            for j in range(i, n):
                a[r * n + j] = a[r * n + j] - f * a[i * n + j]
    return det


def fs_pointwise(const double complex[:, ::1] Zh, const double complex[:, :, ::1] dZh):
    cdef Py_ssize_t P = Zh.shape[0]
    cdef Py_ssize_t N1 = Zh.shape[1]
    cdef Py_ssize_t n = dZh.shape[1]
    q_arr = np.empty(P, dtype=np.float64)
    g_arr = np.empty((P, n, n), dtype=np.complex128)
    d_arr = np.empty(P, dtype=np.float64)
    work_arr = np.empty(n * n, dtype=np.complex128)
    v_arr = np.empty(n, dtype=np.complex128)
    cdef double[::1] q = q_arr
    cdef double complex[:, :, ::1] g = g_arr
    cdef double[::1] detg = d_arr
    cdef double complex[::1] work = work_arr
    cdef double complex[::1] v = v_arr
    cdef Py_ssize_t p, i, a, b
    cdef double qq, q2
    cdef double complex s, zc
    with nogil:
        for p in range(P):
            qq = 0.0
            for i in range(N1):
                qq = qq + Zh[p, i].real * Zh[p, i].real + Zh[p, i].imag * Zh[p, i].imag
            q[p] = qq
            q2 = qq * qq
            for a in range(n):
                s = 0.0
                for i in range(N1):
                    zc = Zh[p, i].real - 1j * Zh[p, i].imag
                    s = s + zc * dZh[p, a, i]
                v[a] = s
            for a in range(n):
                for b in range(n):
                    s = 0.0
                    for i in range(N1):
                        s = s + dZh[p, a, i] * (dZh[p, b, i].real - 1j * dZh[p, b, i].imag)
                    g[p, a, b] = (s * qq - v[a] * (v[b].real - 1j * v[b].imag)) / q2
                    work[a * n + b] = g[p, a, b]
            detg[p] = _hermitian_det(&work[0], <int>n)
    return q_arr, g_arr, d_arr


def moment_sum(const double complex[:, ::1] Zh, const double[::1] c):
    cdef Py_ssize_t P = Zh.shape[0]
    cdef Py_ssize_t N1 = Zh.shape[1]
    # upper triangle accumulated in separate real and imaginary planes
    re_arr = np.zeros((N1, N1), dtype=np.float64)
    im_arr = np.zeros((N1, N1), dtype=np.float64)
    cdef double[:, ::1] ore = re_arr
    cdef double[:, ::1] oim = im_arr
    cdef const double[:, ::1] zv = np.asarray(Zh).view(np.float64)
    cdef Py_ssize_t p, i, j
    cdef double ar, ai, br, bi, cp
    with nogil:
        for p in range(P):
            cp = c[p]
            for i in range(N1):
                ar = cp * zv[p, 2 * i]
                ai = cp * zv[p, 2 * i + 1]
                for j in range(i, N1):
                    br = zv[p, 2 * j]
                    bi = zv[p, 2 * j + 1]
                    ore[i, j] += ar * br + ai * bi
                    oim[i, j] += ai * br - ar * bi
        for i in range(N1):
            for j in range(i + 1, N1):
                ore[j, i] = ore[i, j]
                oim[j, i] = -oim[i, j]
            oim[i, i] = 0.0
    return re_arr + 1j * im_arr
