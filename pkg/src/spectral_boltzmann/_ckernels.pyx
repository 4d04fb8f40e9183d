# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled collision quadrature loops.

Every routine walks the same set of collision triples (v, u, sigma): v and u
run over grid nodes (u != v), sigma over an angular band in the frame of
v - u. Post-collision points are read through the trilinear stencil plus
the five macro correction values (see velocity.interp_stencil).
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, floor, fabs, sqrt, pow

cnp.import_array()

cdef double SQRT_MU_NORM = (2.0 * 3.141592653589793) ** -0.75


cdef struct Geo:
    int n
    int n3
    double V
    double h
    double gamma
    const double* nodes      # (n3, 3)
    const double* smu        # (n3,)
    const double* basis      # (n3, 5)
    int nth
    const double* cth
    const double* sth
    const double* wth        # angular weight incl. b, sin, dphi
    int nph
    const double* cph
    const double* sph


cdef struct Sten:
    int n
    int idx[8]
    double wt[8]
    double eps[5]
    double smu


cdef inline void stencil(double px, double py, double pz, const Geo* g, Sten* s) noexcept nogil:
    cdef double r2 = px * px + py * py + pz * pz
    cdef double sm = SQRT_MU_NORM * exp(-0.25 * r2)
    cdef double b0 = sm, b1 = sm * px, b2 = sm * py, b3 = sm * pz, b4 = sm * (r2 - 3.0)
    cdef double i0_ = 0.0, i1_ = 0.0, i2_ = 0.0, i3_ = 0.0, i4_ = 0.0
    cdef double xi, yi, zi, tx, ty, tz, wx, wy, w
    cdef int ix, iy, iz, dx, dy, dz, jx, jy, jz, k
    cdef const double* bp
    s.smu = sm
    s.n = 0
    if fabs(px) <= g.V and fabs(py) <= g.V and fabs(pz) <= g.V:
        xi = (px + g.V) / g.h - 0.5
        yi = (py + g.V) / g.h - 0.5
        zi = (pz + g.V) / g.h - 0.5
        ix = <int>floor(xi)
        iy = <int>floor(yi)
        iz = <int>floor(zi)
        tx = xi - ix
        ty = yi - iy
        tz = zi - iz
        for dx in range(2):
            jx = ix + dx
            if jx < 0 or jx >= g.n:
                continue
            wx = tx if dx else 1.0 - tx
            for dy in range(2):
                jy = iy + dy
                if jy < 0 or jy >= g.n:
                    continue
                wy = wx * (ty if dy else 1.0 - ty)
                for dz in range(2):
                    jz = iz + dz
                    if jz < 0 or jz >= g.n:
                        continue
                    w = wy * (tz if dz else 1.0 - tz)
                    k = (jx * g.n + jy) * g.n + jz
                    s.idx[s.n] = k
                    s.wt[s.n] = w
                    s.n += 1
                    bp = g.basis + 5 * k
                    i0_ += w * bp[0]
                    i1_ += w * bp[1]
                    i2_ += w * bp[2]
                    i3_ += w * bp[3]
                    i4_ += w * bp[4]
    s.eps[0] = b0 - i0_
    s.eps[1] = b1 - i1_
    s.eps[2] = b2 - i2_
    s.eps[3] = b3 - i3_
    s.eps[4] = b4 - i4_


cdef inline void frame(double kx, double ky, double kz, double* e1, double* e2) noexcept nogil:
    cdef double ax = 0.0, ay = 0.0, az = 1.0, nrm
    if fabs(kz) >= 0.9:
        ax = 1.0
        az = 0.0
    e1[0] = ky * az - kz * ay
    e1[1] = kz * ax - kx * az
    e1[2] = kx * ay - ky * ax
    nrm = sqrt(e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2])
    e1[0] /= nrm
    e1[1] /= nrm
    e1[2] /= nrm
    e2[0] = ky * e1[2] - kz * e1[1]
    e2[1] = kz * e1[0] - kx * e1[2]
    e2[2] = kx * e1[1] - ky * e1[0]


cdef inline double interp(const Sten* s, const double* fe, int n3) noexcept nogil:
    cdef double acc = 0.0
    cdef int c, k
    for c in range(s.n):
        acc += s.wt[c] * fe[s.idx[c]]
    for k in range(5):
        acc += s.eps[k] * fe[n3 + k]
    return acc


cdef Geo make_geo(grid_n, V, gamma, double[:, ::1] nodes, double[::1] smu,
                  double[:, ::1] basis, double[::1] cth, double[::1] sth,
                  double[::1] wth, double[::1] cph, double[::1] sph):
    cdef Geo g
    g.n = grid_n
    g.n3 = grid_n * grid_n * grid_n
    g.V = V
    g.h = 2.0 * V / grid_n
    g.gamma = gamma
    g.nodes = &nodes[0, 0]
    g.smu = &smu[0]
    g.basis = &basis[0, 0]
    g.nth = cth.shape[0]
    g.cth = &cth[0]
    g.sth = &sth[0]
    g.wth = &wth[0]
    g.nph = cph.shape[0]
    g.cph = &cph[0]
    g.sph = &sph[0]
    return g


cdef inline void sym_add(double* U, Py_ssize_t m, const int* ix, const double* val,
                         int cnt, double scale) noexcept nogil:
    """U[min, max] += scale * val_p val_q over p < q, half weight on p == q."""
    cdef int p, q, a, b
    cdef double x
    for p in range(cnt):
        a = ix[p]
        x = scale * val[p]
        U[a * m + a] += 0.5 * x * val[p]
        for q in range(p + 1, cnt):
            b = ix[q]
            if a <= b:
                U[a * m + b] += x * val[q]
            else:
                U[b * m + a] += x * val[q]


def assemble_forms(int grid_n, double V, double gamma, double[:, ::1] nodes,
                   double[::1] smu, double[:, ::1] basis, double[::1] cth,
                   double[::1] sth, double[::1] wth, double[::1] cph, double[::1] sph,
                   double[:, ::1] U11, double[:, ::1] A12, double[:, ::1] UG,
                   double[::1] gdiag):
    """Accumulate the raw sums for the linearized operator and dissipation Gram.

    U11 (upper half of sum c D1 D1^T), A12 (sum c D1 D2^T), UG (upper half of
    sum c mu(u) d d^T) and gdiag (sum c (sqrt mu(v') - sqrt mu(v))^2 per u),
    all in the extended index space of size N^3 + 5.
    """
    cdef Geo g = make_geo(grid_n, V, gamma, nodes, smu, basis, cth, sth, wth, cph, sph)
    cdef Py_ssize_t m = g.n3 + 5
    cdef double* pU = &U11[0, 0]
    cdef double* pA = &A12[0, 0]
    cdef double* pG = &UG[0, 0]
    cdef double* pd = &gdiag[0]
    cdef int iv, iu, i, j, c, k, n1, n2, nd
    cdef double vx, vy, vz, wx, wy, wz, r, rg, kx, ky, kz, cx, cy, cz, half
    cdef double sx, sy, sz, cw, alpha, beta, alpha2, beta2, x, y
    cdef double e1[3]
    cdef double e2[3]
    cdef Sten S1, S2
    cdef int ix1[14]
    cdef double d1[14]
    cdef int ix2[14]
    cdef double d2[14]
    cdef int ixd[14]
    cdef double dd[14]
    with nogil:
        for iv in range(g.n3):
            vx = g.nodes[3 * iv]
            vy = g.nodes[3 * iv + 1]
            vz = g.nodes[3 * iv + 2]
            beta2 = g.smu[iv]
            for iu in range(g.n3):
                if iu == iv:
                    continue
                wx = vx - g.nodes[3 * iu]
                wy = vy - g.nodes[3 * iu + 1]
                wz = vz - g.nodes[3 * iu + 2]
                r = sqrt(wx * wx + wy * wy + wz * wz)
                rg = pow(r, g.gamma)
                kx = wx / r
                ky = wy / r
                kz = wz / r
                frame(kx, ky, kz, e1, e2)
                cx = 0.5 * (vx + g.nodes[3 * iu])
                cy = 0.5 * (vy + g.nodes[3 * iu + 1])
                cz = 0.5 * (vz + g.nodes[3 * iu + 2])
                half = 0.5 * r
                beta = g.smu[iu]
                for i in range(g.nth):
                    for j in range(g.nph):
                        sx = g.cth[i] * kx + g.sth[i] * (g.cph[j] * e1[0] + g.sph[j] * e2[0])
                        sy = g.cth[i] * ky + g.sth[i] * (g.cph[j] * e1[1] + g.sph[j] * e2[1])
                        sz = g.cth[i] * kz + g.sth[i] * (g.cph[j] * e1[2] + g.sph[j] * e2[2])
                        cw = rg * g.wth[i]
                        stencil(cx + half * sx, cy + half * sy, cz + half * sz, &g, &S1)
                        stencil(cx - half * sx, cy - half * sy, cz - half * sz, &g, &S2)
                        alpha = S2.smu
                        alpha2 = S1.smu
                        # D1 = sqrt mu(u') I_{v'} - sqrt mu(u) e_v ; d = I_{v'} - e_v
                        n1 = 0
                        for c in range(S1.n):
                            ix1[n1] = S1.idx[c]
                            d1[n1] = alpha * S1.wt[c]
                            ixd[n1] = S1.idx[c]
                            dd[n1] = S1.wt[c]
                            n1 += 1
                        ix1[n1] = iv
                        d1[n1] = -beta
                        ixd[n1] = iv
                        dd[n1] = -1.0
                        n1 += 1
                        for k in range(5):
                            ix1[n1] = g.n3 + k
                            d1[n1] = alpha * S1.eps[k]
                            ixd[n1] = g.n3 + k
                            dd[n1] = S1.eps[k]
                            n1 += 1
                        # D2 = sqrt mu(v') I_{u'} - sqrt mu(v) e_u
                        n2 = 0
                        for c in range(S2.n):
                            ix2[n2] = S2.idx[c]
                            d2[n2] = alpha2 * S2.wt[c]
                            n2 += 1
                        ix2[n2] = iu
                        d2[n2] = -beta2
                        n2 += 1
                        for k in range(5):
                            ix2[n2] = g.n3 + k
                            d2[n2] = alpha2 * S2.eps[k]
                            n2 += 1
                        sym_add(pU, m, ix1, d1, n1, cw)
                        for c in range(n1):
                            x = cw * d1[c]
                            for k in range(n2):
                                pA[ix1[c] * m + ix2[k]] += x * d2[k]
                        sym_add(pG, m, ixd, dd, n1, cw * beta * beta)
                        y = alpha2 - beta2
                        pd[iu] += cw * y * y


def gamma_pair(int grid_n, double V, double gamma, double[:, ::1] nodes,
               double[::1] smu, double[:, ::1] basis, double[::1] cth,
               double[::1] sth, double[::1] wth, double[::1] cph, double[::1] sph,
               double[::1] fe, double[::1] ge, double[::1] out):
    """out[v] += sum c sqrt mu(u) [f(u') g(v') - f(u) g(v)] for extended f, g."""
    cdef Geo g = make_geo(grid_n, V, gamma, nodes, smu, basis, cth, sth, wth, cph, sph)
    cdef const double* pf = &fe[0]
    cdef const double* pg = &ge[0]
    cdef int iv, iu, i, j
    cdef double vx, vy, vz, wx, wy, wz, r, rg, kx, ky, kz, cx, cy, cz, half
    cdef double sx, sy, sz, acc, loss, gain
    cdef double e1[3]
    cdef double e2[3]
    cdef Sten S1, S2
    with nogil:
        for iv in range(g.n3):
            vx = g.nodes[3 * iv]
            vy = g.nodes[3 * iv + 1]
            vz = g.nodes[3 * iv + 2]
            acc = 0.0
            for iu in range(g.n3):
                if iu == iv:
                    continue
                wx = vx - g.nodes[3 * iu]
                wy = vy - g.nodes[3 * iu + 1]
                wz = vz - g.nodes[3 * iu + 2]
                r = sqrt(wx * wx + wy * wy + wz * wz)
                rg = pow(r, g.gamma) * g.smu[iu]
                kx = wx / r
                ky = wy / r
                kz = wz / r
                frame(kx, ky, kz, e1, e2)
                cx = 0.5 * (vx + g.nodes[3 * iu])
                cy = 0.5 * (vy + g.nodes[3 * iu + 1])
                cz = 0.5 * (vz + g.nodes[3 * iu + 2])
                half = 0.5 * r
                loss = pf[iu] * pg[iv]
                for i in range(g.nth):
                    gain = 0.0
                    for j in range(g.nph):
                        sx = g.cth[i] * kx + g.sth[i] * (g.cph[j] * e1[0] + g.sph[j] * e2[0])
                        sy = g.cth[i] * ky + g.sth[i] * (g.cph[j] * e1[1] + g.sph[j] * e2[1])
                        sz = g.cth[i] * kz + g.sth[i] * (g.cph[j] * e1[2] + g.sph[j] * e2[2])
                        stencil(cx + half * sx, cy + half * sy, cz + half * sz, &g, &S1)
                        stencil(cx - half * sx, cy - half * sy, cz - half * sz, &g, &S2)
                        gain += interp(&S2, pf, g.n3) * interp(&S1, pg, g.n3) - loss
                    acc += rg * g.wth[i] * gain
            out[iv] += acc


def gamma_matrix(int grid_n, double V, double gamma, double[:, ::1] nodes,
                 double[::1] smu, double[:, ::1] basis, double[::1] cth,
                 double[::1] sth, double[::1] wth, double[::1] cph, double[::1] sph,
                 double[::1] fe, double[:, ::1] out):
    """out[v, b] such that Gamma(f, g)(v) = sum_b out[v, b] ge[b] (extended g)."""
    cdef Geo g = make_geo(grid_n, V, gamma, nodes, smu, basis, cth, sth, wth, cph, sph)
    cdef const double* pf = &fe[0]
    cdef Py_ssize_t m = g.n3 + 5
    cdef double* po = &out[0, 0]
    cdef double* row
    cdef int iv, iu, i, j, c, k
    cdef double vx, vy, vz, wx, wy, wz, r, rg, kx, ky, kz, cx, cy, cz, half
    cdef double sx, sy, sz, cw, x
    cdef double e1[3]
    cdef double e2[3]
    cdef Sten S1, S2
    with nogil:
        for iv in range(g.n3):
            row = po + iv * m
            vx = g.nodes[3 * iv]
            vy = g.nodes[3 * iv + 1]
            vz = g.nodes[3 * iv + 2]
            for iu in range(g.n3):
                if iu == iv:
                    continue
                wx = vx - g.nodes[3 * iu]
                wy = vy - g.nodes[3 * iu + 1]
                wz = vz - g.nodes[3 * iu + 2]
                r = sqrt(wx * wx + wy * wy + wz * wz)
                rg = pow(r, g.gamma) * g.smu[iu]
                kx = wx / r
                ky = wy / r
                kz = wz / r
                frame(kx, ky, kz, e1, e2)
                cx = 0.5 * (vx + g.nodes[3 * iu])
                cy = 0.5 * (vy + g.nodes[3 * iu + 1])
                cz = 0.5 * (vz + g.nodes[3 * iu + 2])
                half = 0.5 * r
                for i in range(g.nth):
                    cw = rg * g.wth[i]
                    for j in range(g.nph):
                        sx = g.cth[i] * kx + g.sth[i] * (g.cph[j] * e1[0] + g.sph[j] * e2[0])
                        sy = g.cth[i] * ky + g.sth[i] * (g.cph[j] * e1[1] + g.sph[j] * e2[1])
                        sz = g.cth[i] * kz + g.sth[i] * (g.cph[j] * e1[2] + g.sph[j] * e2[2])
                        stencil(cx + half * sx, cy + half * sy, cz + half * sz, &g, &S1)
                        stencil(cx - half * sx, cy - half * sy, cz - half * sz, &g, &S2)
                        x = cw * interp(&S2, pf, g.n3)
                        for c in range(S1.n):
                            row[S1.idx[c]] += x * S1.wt[c]
                        for k in range(5):
                            row[g.n3 + k] += x * S1.eps[k]
                        row[iv] -= cw * pf[iu]


def gamma_tensor(int grid_n, double V, double gamma, double[:, ::1] nodes,
                 double[::1] smu, double[:, ::1] basis, double[::1] cth,
                 double[::1] sth, double[::1] wth, double[::1] cph, double[::1] sph,
                 double[:, ::1] out, bint packed):
    """Bilinear tensor of Gamma in the extended space.

    packed=False: out has shape (N^3, M*M) with Gamma(f,g)(v) = sum T[v,a,b] fe[a] ge[b].
    packed=True: out has shape (N^3, M(M+1)/2) holding the symmetrized tensor on
    a <= b, so that Gamma(f,f)(v) = sum_{a<=b} S[v,ab] fe[a] fe[b].
    """
    cdef Geo g = make_geo(grid_n, V, gamma, nodes, smu, basis, cth, sth, wth, cph, sph)
    cdef Py_ssize_t m = g.n3 + 5
    cdef Py_ssize_t ncol = out.shape[1]
    cdef double* po = &out[0, 0]
    cdef double* row
    cdef int iv, iu, i, j, c1, c2, a, b, lo, hi
    cdef double vx, vy, vz, wx, wy, wz, r, rg, kx, ky, kz, cx, cy, cz, half
    cdef double sx, sy, sz, cw, x
    cdef double e1[3]
    cdef double e2[3]
    cdef int ia[13]
    cdef double va[13]
    cdef int ib[13]
    cdef double vb[13]
    cdef int na, nb
    cdef Sten S1, S2
    with nogil:
        for iv in range(g.n3):
            row = po + iv * ncol
            vx = g.nodes[3 * iv]
            vy = g.nodes[3 * iv + 1]
            vz = g.nodes[3 * iv + 2]
            for iu in range(g.n3):
                if iu == iv:
                    continue
                wx = vx - g.nodes[3 * iu]
                wy = vy - g.nodes[3 * iu + 1]
                wz = vz - g.nodes[3 * iu + 2]
                r = sqrt(wx * wx + wy * wy + wz * wz)
                rg = pow(r, g.gamma) * g.smu[iu]
                kx = wx / r
                ky = wy / r
                kz = wz / r
                frame(kx, ky, kz, e1, e2)
                cx = 0.5 * (vx + g.nodes[3 * iu])
                cy = 0.5 * (vy + g.nodes[3 * iu + 1])
                cz = 0.5 * (vz + g.nodes[3 * iu + 2])
                half = 0.5 * r
                for i in range(g.nth):
                    cw = rg * g.wth[i]
                    for j in range(g.nph):
                        sx = g.cth[i] * kx + g.sth[i] * (g.cph[j] * e1[0] + g.sph[j] * e2[0])
                        sy = g.cth[i] * ky + g.sth[i] * (g.cph[j] * e1[1] + g.sph[j] * e2[1])
                        sz = g.cth[i] * kz + g.sth[i] * (g.cph[j] * e1[2] + g.sph[j] * e2[2])
                        stencil(cx + half * sx, cy + half * sy, cz + half * sz, &g, &S1)
                        stencil(cx - half * sx, cy - half * sy, cz - half * sz, &g, &S2)
                        na = 0
                        for c1 in range(S2.n):
                            ia[na] = S2.idx[c1]
                            va[na] = cw * S2.wt[c1]
                            na += 1
                        for c1 in range(5):
                            ia[na] = g.n3 + c1
                            va[na] = cw * S2.eps[c1]
                            na += 1
                        nb = 0
                        for c2 in range(S1.n):
                            ib[nb] = S1.idx[c2]
                            vb[nb] = S1.wt[c2]
                            nb += 1
                        for c2 in range(5):
                            ib[nb] = g.n3 + c2
                            vb[nb] = S1.eps[c2]
                            nb += 1
                        for c1 in range(na):
                            a = ia[c1]
                            x = va[c1]
                            for c2 in range(nb):
                                b = ib[c2]
                                if packed:
                                    lo = a if a <= b else b
                                    hi = b if a <= b else a
                                    row[lo * m - (lo * (lo - 1)) // 2 + hi - lo] += x * vb[c2]
                                else:
                                    row[a * m + b] += x * vb[c2]
                        x = rg * g.wth[i]
                        if packed:
                            lo = iu if iu <= iv else iv
                            hi = iv if iu <= iv else iu
                            row[lo * m - (lo * (lo - 1)) // 2 + hi - lo] -= x
                        else:
                            row[iu * m + iv] -= x


def gamma_dual(int grid_n, double V, double gamma, double[:, ::1] nodes,
               double[::1] smu, double[:, ::1] basis, double[::1] cth,
               double[::1] sth, double[::1] wth, double[::1] cph, double[::1] sph,
               double[::1] ge, double[::1] hn, double[::1] out):
    """Gradient in f of sum_v h(v) Gamma(f, g)(v), in the extended index space.

    ge is the extended second argument, hn the nodal test field.
    """
    cdef Geo g = make_geo(grid_n, V, gamma, nodes, smu, basis, cth, sth, wth, cph, sph)
    cdef const double* pg = &ge[0]
    cdef double* po = &out[0]
    cdef int iv, iu, i, j, c, k
    cdef double vx, vy, vz, wx, wy, wz, r, rg, kx, ky, kz, cx, cy, cz, half
    cdef double sx, sy, sz, cw, x, loss
    cdef double e1[3]
    cdef double e2[3]
    cdef Sten S1, S2
    with nogil:
        for iv in range(g.n3):
            if hn[iv] == 0.0:
                continue
            vx = g.nodes[3 * iv]
            vy = g.nodes[3 * iv + 1]
            vz = g.nodes[3 * iv + 2]
            for iu in range(g.n3):
                if iu == iv:
                    continue
                wx = vx - g.nodes[3 * iu]
                wy = vy - g.nodes[3 * iu + 1]
                wz = vz - g.nodes[3 * iu + 2]
                r = sqrt(wx * wx + wy * wy + wz * wz)
                rg = pow(r, g.gamma) * g.smu[iu] * hn[iv]
                kx = wx / r
                ky = wy / r
                kz = wz / r
                frame(kx, ky, kz, e1, e2)
                cx = 0.5 * (vx + g.nodes[3 * iu])
                cy = 0.5 * (vy + g.nodes[3 * iu + 1])
                cz = 0.5 * (vz + g.nodes[3 * iu + 2])
                half = 0.5 * r
                loss = 0.0
                for i in range(g.nth):
                    cw = rg * g.wth[i]
                    for j in range(g.nph):
                        sx = g.cth[i] * kx + g.sth[i] * (g.cph[j] * e1[0] + g.sph[j] * e2[0])
                        sy = g.cth[i] * ky + g.sth[i] * (g.cph[j] * e1[1] + g.sph[j] * e2[1])
                        sz = g.cth[i] * kz + g.sth[i] * (g.cph[j] * e1[2] + g.sph[j] * e2[2])
                        stencil(cx + half * sx, cy + half * sy, cz + half * sz, &g, &S1)
                        stencil(cx - half * sx, cy - half * sy, cz - half * sz, &g, &S2)
                        x = cw * interp(&S1, pg, g.n3)
                        for c in range(S2.n):
                            po[S2.idx[c]] += x * S2.wt[c]
                        for k in range(5):
                            po[g.n3 + k] += x * S2.eps[k]
                        loss += cw
                po[iu] -= loss * pg[iv]
