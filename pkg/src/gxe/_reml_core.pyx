# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled REML kernel. Same contract as gxe._reml_py; loops over genotypes
and skips unobserved cells, so the cost scales with observed cells."""

import numpy as np
from libc.math cimport log, sqrt


cdef int _chol(double[:, ::1] K, int m) noexcept nogil:
    cdef int i, j, k
    cdef double s
    for j in range(m):
        s = K[j, j]
        for k in range(j):
            s -= K[j, k] * K[j, k]
        if s <= 0.0:
            return -1
        K[j, j] = sqrt(s)
        for i in range(j + 1, m):
            s = K[i, j]
            for k in range(j):
                s -= K[i, k] * K[j, k]
            K[i, j] = s / K[j, j]
    return 0


def pass1(double[:, ::1] cnt, double[:, ::1] s1, double[:, ::1] s2,
          double[:, ::1] U, double[::1] psi, double[::1] rvar):
    cdef Py_ssize_t n_g = cnt.shape[0], n_e = cnt.shape[1], m = U.shape[1]
    delta_a = np.zeros((n_g, n_e))
    t_a = np.zeros((n_g, n_e))
    Ut_a = np.zeros((n_g, n_e, m))
    A_a = np.zeros((n_e, n_e))
    b_a = np.zeros(n_e)
    K_a = np.zeros((m, m))
    q_a = np.zeros(m)
    J_a = np.zeros(n_e, dtype=np.intp)
    cdef double[:, ::1] delta = delta_a, t = t_a, A = A_a, K = K_a
    cdef double[:, :, ::1] Ut = Ut_a
    cdef double[::1] b = b_a, q = q_a
    cdef Py_ssize_t[::1] J = J_a
    cdef Py_ssize_t i, j, k, p, r, jj, kk, nJ
    cdef double den, a, s, logdet_b = 0.0, logdet_k = 0.0, yvy = 0.0
    cdef bint failed = False

    with nogil:
        for i in range(n_g):
            nJ = 0
            for j in range(n_e):
                if cnt[i, j] > 0.0:
                    den = rvar[j] + cnt[i, j] * psi[j]
                    a = 1.0 / den
                    delta[i, j] = cnt[i, j] * a
                    t[i, j] = s1[i, j] * a
                    logdet_b += cnt[i, j] * log(rvar[j]) + log(den / rvar[j])
                    yvy += (s2[i, j] - psi[j] * s1[i, j] * s1[i, j] * a) / rvar[j]
                    J[nJ] = j
                    nJ += 1
            for p in range(m):
                for r in range(p + 1):
                    s = 1.0 if p == r else 0.0
                    for jj in range(nJ):
                        j = J[jj]
                        s += U[j, p] * delta[i, j] * U[j, r]
                    K[p, r] = s
            if _chol(K, m) != 0:
                failed = True
                break
            for p in range(m):
                logdet_k += 2.0 * log(K[p, p])
                q[p] = 0.0
            for j in range(n_e):
                for p in range(m):
                    s = U[j, p]
                    for r in range(p):
                        s -= K[p, r] * Ut[i, j, r]
                    Ut[i, j, p] = s / K[p, p]
            for jj in range(nJ):
                j = J[jj]
                for p in range(m):
                    q[p] += Ut[i, j, p] * t[i, j]
            for p in range(m):
                yvy -= q[p] * q[p]
            for jj in range(nJ):
                j = J[jj]
                A[j, j] += delta[i, j]
                s = t[i, j]
                for p in range(m):
                    s -= delta[i, j] * Ut[i, j, p] * q[p]
                b[j] += s
                for kk in range(jj + 1):
                    k = J[kk]
                    s = 0.0
                    for p in range(m):
                        s += Ut[i, j, p] * Ut[i, k, p]
                    A[j, k] -= delta[i, j] * delta[i, k] * s
        if not failed:
            for j in range(n_e):
                for k in range(j):
                    A[k, j] = A[j, k]
    if failed:
        raise np.linalg.LinAlgError("K_i not positive definite")
    return logdet_b, logdet_k, yvy, A_a, b_a, Ut_a, delta_a, t_a


def pass2(double[:, ::1] cnt, double[:, ::1] s1, double[:, ::1] s2,
          double[:, ::1] U, double[::1] psi, double[::1] rvar,
          double[::1] beta, double[:, ::1] Ainv, double[:, :, ::1] Ut,
          double[:, ::1] delta, double[:, ::1] t, bint grad=True):
    cdef Py_ssize_t n_g = cnt.shape[0], n_e = cnt.shape[1], m = U.shape[1]
    e_a = np.zeros((n_g, n_e))
    qt_a = np.zeros(m)
    tau_a = np.zeros(n_e)
    J_a = np.zeros(n_e, dtype=np.intp)
    cdef double[:, ::1] e = e_a
    cdef double[::1] qt = qt_a, tau = tau_a
    cdef Py_ssize_t[::1] J = J_a
    cdef Py_ssize_t i, j, k, p, r, jj, kk, nJ
    cdef double s, s3, den, a, n, r2, bss, uku, vav, rho, rr, c

    S_a = np.zeros((n_e, n_e)) if grad else None
    DtD_a = np.zeros((n_e, n_e)) if grad else None
    res_a = np.zeros(n_e) if grad else None
    Y_a = np.zeros((n_e, m))
    NY_a = np.zeros((m, m))
    cdef double[:, ::1] S, DtD, Y = Y_a, NY = NY_a
    cdef double[::1] res
    if grad:
        S = S_a
        DtD = DtD_a
        res = res_a

    with nogil:
        for i in range(n_g):
            nJ = 0
            for j in range(n_e):
                if cnt[i, j] > 0.0:
                    J[nJ] = j
                    nJ += 1
            for p in range(m):
                qt[p] = 0.0
            for jj in range(nJ):
                j = J[jj]
                tau[j] = t[i, j] - delta[i, j] * beta[j]
                for p in range(m):
                    qt[p] += Ut[i, j, p] * tau[j]
            for jj in range(nJ):
                j = J[jj]
                s = tau[j]
                for p in range(m):
                    s -= delta[i, j] * Ut[i, j, p] * qt[p]
                e[i, j] = s
            if not grad or nJ == 0:
                continue

            # Y = A^-1 N_i, NY = N_i' Y
            for j in range(n_e):
                for p in range(m):
                    s = 0.0
                    for kk in range(nJ):
                        k = J[kk]
                        s += Ainv[j, k] * delta[i, k] * Ut[i, k, p]
                    Y[j, p] = s
            for p in range(m):
                for r in range(m):
                    s = 0.0
                    for jj in range(nJ):
                        j = J[jj]
                        s += delta[i, j] * Ut[i, j, p] * Y[j, r]
                    NY[p, r] = s
            for jj in range(nJ):
                j = J[jj]
                for kk in range(nJ):
                    k = J[kk]
                    DtD[j, k] += delta[i, j] * delta[i, k]
                    # -(term2 + term2') + term3
                    s = 0.0
                    s3 = 0.0
                    for p in range(m):
                        s += delta[i, j] * Y[j, p] * delta[i, k] * Ut[i, k, p]
                        s += delta[i, k] * Y[k, p] * delta[i, j] * Ut[i, j, p]
                        for r in range(m):
                            s3 += Ut[i, j, p] * NY[p, r] * Ut[i, k, r]
                    S[j, k] += delta[i, j] * delta[i, k] * s3 - s

                n = cnt[i, j]
                r2 = rvar[j]
                den = r2 + n * psi[j]
                a = 1.0 / den
                bss = (r2 + (n - 1.0) * psi[j]) / (r2 * den)
                uku = 0.0
                vav = Ainv[j, j]
                c = 0.0
                for p in range(m):
                    uku += Ut[i, j, p] * Ut[i, j, p]
                    vav -= 2.0 * Y[j, p] * Ut[i, j, p]
                    c += Ut[i, j, p] * qt[p]
                    for r in range(m):
                        vav += Ut[i, j, p] * NY[p, r] * Ut[i, j, r]
                rho = s1[i, j] - n * beta[j]
                rr = s2[i, j] - 2.0 * beta[j] * s1[i, j] + n * beta[j] * beta[j]
                c = a * (psi[j] / r2) * rho + a * c
                res[j] += n * (bss - a * a * (uku + vav))
                res[j] -= rr / (r2 * r2) - 2.0 * c * rho / r2 + n * c * c
        if grad:
            for j in range(n_e):
                for k in range(n_e):
                    S[j, k] += Ainv[j, k] * DtD[j, k]
    return e_a, S_a, res_a
