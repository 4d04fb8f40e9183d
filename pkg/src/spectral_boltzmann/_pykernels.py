"""NumPy fallback for the compiled collision loops.

Same signatures and in-place semantics as the compiled module; each routine
handles one velocity v at a time, vectorised over all (u, sigma) pairs, with
the interpolation stencils held as sparse matrices.
"""

import numpy as np
import scipy.sparse as sp

from .velocity import SQRT_MU_NORM


def _stencils(points, n, V, basis):
    """Sparse (m, n^3 + 5) interpolation rows and sqrt(mu) at the points."""
    m = points.shape[0]
    n3 = n ** 3
    h = 2.0 * V / n
    r2 = np.einsum("ij,ij->i", points, points)
    smu = SQRT_MU_NORM * np.exp(-0.25 * r2)
    exact = smu[:, None] * np.column_stack([np.ones(m), points, r2 - 3.0])
    xi = (points + V) / h - 0.5
    i0 = np.floor(xi).astype(np.int64)
    t = xi - i0
    inside = np.all(np.abs(points) <= V, axis=1)
    rows, cols, vals = [], [], []
    interp = np.zeros((m, 5))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ix, iy, iz = i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz
                ok = inside & (ix >= 0) & (ix < n) & (iy >= 0) & (iy < n) & (iz >= 0) & (iz < n)
                w = ((t[:, 0] if dx else 1 - t[:, 0]) * (t[:, 1] if dy else 1 - t[:, 1])
                     * (t[:, 2] if dz else 1 - t[:, 2]))
                sel = np.nonzero(ok)[0]
                k = (ix[sel] * n + iy[sel]) * n + iz[sel]
                rows.append(sel)
                cols.append(k)
                vals.append(w[sel])
                interp[sel] += w[sel, None] * basis[k]
    eps = exact - interp
    rows.append(np.repeat(np.arange(m), 5))
    cols.append(np.tile(np.arange(n3, n3 + 5), m))
    vals.append(eps.ravel())
    mat = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(m, n3 + 5))
    return mat, smu


def _frames(k):
    a = np.zeros_like(k)
    use_z = np.abs(k[:, 2]) < 0.9
    a[use_z, 2] = 1.0
    a[~use_z, 0] = 1.0
    e1 = np.cross(k, a)
    e1 /= np.linalg.norm(e1, axis=1)[:, None]
    e2 = np.cross(k, e1)
    return e1, e2


def _triples(iv, n, V, gamma, nodes, cth, sth, wth, cph, sph):
    """All (u, sigma) pairs for velocity iv: u index, r^gamma * angular weight,
    post-collision v' and u'."""
    v = nodes[iv]
    iu = np.delete(np.arange(nodes.shape[0]), iv)
    w = v - nodes[iu]
    r = np.linalg.norm(w, axis=1)
    k = w / r[:, None]
    e1, e2 = _frames(k)
    c = 0.5 * (v + nodes[iu])
    sig = (cth[None, :, None, None] * k[:, None, None, :]
           + sth[None, :, None, None] * (cph[None, None, :, None] * e1[:, None, None, :]
                                         + sph[None, None, :, None] * e2[:, None, None, :]))
    half = (0.5 * r)[:, None, None, None]
    vp = (c[:, None, None, :] + half * sig).reshape(-1, 3)
    up = (c[:, None, None, :] - half * sig).reshape(-1, 3)
    cw = (r ** gamma)[:, None, None] * wth[None, :, None] * np.ones(len(cph))[None, None, :]
    nsig = len(cth) * len(cph)
    return np.repeat(iu, nsig), cw.ravel(), vp, up


def _unit_rows(index, m, scale):
    return sp.csr_matrix((scale, (np.arange(len(index)), index)), shape=(len(index), m))


def assemble_forms(grid_n, V, gamma, nodes, smu, basis, cth, sth, wth, cph, sph,
                   U11, A12, UG, gdiag):
    n3 = grid_n ** 3
    m = n3 + 5
    F11 = np.zeros((m, m))
    FG = np.zeros((m, m))
    for iv in range(n3):
        iu, cw, vp, up = _triples(iv, grid_n, V, gamma, nodes, cth, sth, wth, cph, sph)
        S1, sm1 = _stencils(vp, grid_n, V, basis)
        S2, sm2 = _stencils(up, grid_n, V, basis)
        ev = _unit_rows(np.full(len(iu), iv), m, np.ones(len(iu)))
        eu = _unit_rows(iu, m, np.ones(len(iu)))
        D1 = sp.diags(sm2) @ S1 - sp.diags(smu[iu]) @ ev
        D2 = sp.diags(sm1) @ S2 - smu[iv] * eu
        d = S1 - ev
        C = sp.diags(cw)
        F11 += (D1.T @ C @ D1).toarray()
        A12 += (D1.T @ C @ D2).toarray()
        FG += (d.T @ sp.diags(cw * smu[iu] ** 2) @ d).toarray()
        np.add.at(gdiag, iu, cw * (sm1 - smu[iv]) ** 2)
    for full, upper in ((F11, U11), (FG, UG)):
        upper += np.triu(full, 1) + 0.5 * np.diag(np.diag(full))


def gamma_pair(grid_n, V, gamma, nodes, smu, basis, cth, sth, wth, cph, sph, fe, ge, out):
    for iv in range(grid_n ** 3):
        iu, cw, vp, up = _triples(iv, grid_n, V, gamma, nodes, cth, sth, wth, cph, sph)
        S1, _ = _stencils(vp, grid_n, V, basis)
        S2, _ = _stencils(up, grid_n, V, basis)
        c = cw * smu[iu]
        out[iv] += np.sum(c * ((S2 @ fe) * (S1 @ ge) - fe[iu] * ge[iv]))


def gamma_matrix(grid_n, V, gamma, nodes, smu, basis, cth, sth, wth, cph, sph, fe, out):
    for iv in range(grid_n ** 3):
        iu, cw, vp, up = _triples(iv, grid_n, V, gamma, nodes, cth, sth, wth, cph, sph)
        S1, _ = _stencils(vp, grid_n, V, basis)
        S2, _ = _stencils(up, grid_n, V, basis)
        c = cw * smu[iu]
        out[iv] += S1.T @ (c * (S2 @ fe))
        out[iv, iv] -= np.sum(c * fe[iu])


def gamma_tensor(grid_n, V, gamma, nodes, smu, basis, cth, sth, wth, cph, sph, out, packed):
    n3 = grid_n ** 3
    m = n3 + 5
    upper = np.triu_indices(m)
    for iv in range(n3):
        iu, cw, vp, up = _triples(iv, grid_n, V, gamma, nodes, cth, sth, wth, cph, sph)
        S1, _ = _stencils(vp, grid_n, V, basis)
        S2, _ = _stencils(up, grid_n, V, basis)
        c = cw * smu[iu]
        T = (S2.T @ sp.diags(c) @ S1).toarray()
        np.subtract.at(T[:, iv], iu, c)
        if packed:
            S = T + T.T
            S[np.diag_indices(m)] *= 0.5
            out[iv] += S[upper]
        else:
            out[iv] += T.ravel()


def gamma_dual(grid_n, V, gamma, nodes, smu, basis, cth, sth, wth, cph, sph, ge, hn, out):
    for iv in range(grid_n ** 3):
        if hn[iv] == 0.0:
            continue
        iu, cw, vp, up = _triples(iv, grid_n, V, gamma, nodes, cth, sth, wth, cph, sph)
        S1, _ = _stencils(vp, grid_n, V, basis)
        S2, _ = _stencils(up, grid_n, V, basis)
        c = cw * smu[iu] * hn[iv]
        out += S2.T @ (c * (S1 @ ge))
        np.subtract.at(out, iu, c * ge[iv])
