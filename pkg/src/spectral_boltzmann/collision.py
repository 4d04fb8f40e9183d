"""Collision kernel, quadrature oracle and assembled operator matrices.

Conventions used throughout:

* Perturbation fields f live on the velocity grid; F-space fields
  (Q's arguments) are related by F = sqrt(mu) f.
* Post-collision values are read with the velocity.interpolate rule: the
  macro part exactly, the remainder trilinearly with zero extension.
  F-space fields are interpolated as sqrt(mu) * I(F / sqrt(mu)).
* The angular integral runs over the band theta in [theta_min, pi/2]
  around v - u, where sin(theta) b(cos theta) = b0 theta^(-1-2s) is smooth.
* L, L1, L2 are stored as operators (matrix acting on nodal values, inner
  product h^3 x.y); D_GRAM, D_GRAM_WEIGHTED and BALL_MASS are stored as
  quadratic forms (||f||^2 = f.G.f).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from . import kernels
from .velocity import (AngularBand, MacroProjector, SphereQuadrature, VelocityGrid, WeightSpec,
                       interpolate, macro_basis, maxwellian, sqrt_maxwellian, weight_field)

log = logging.getLogger(__name__)

CACHE_ENV = "SPECTRAL_BOLTZMANN_CACHE"
MATRIX_MAGIC = b"SBOM"
MEMORY_BUDGET_BYTES = 3 * 2 ** 30
ORACLE_NODE_BUDGET = 2_000_000


class BudgetError(RuntimeError):
    """Requested discretization does not fit the memory or cost budget."""


@dataclass(frozen=True)
class KernelSpec:
    """B(v-u, sigma) = |v-u|^gamma b(cos theta) with a grazing cutoff theta_min."""

    gamma: float = 1.0
    s: float = 0.5
    theta_min: float = 0.2
    b0: float = 1.0

    def __post_init__(self):
        errors = self.violations()
        if errors:
            raise ValueError("; ".join(errors))

    def violations(self) -> list[str]:
        out = []
        if not -3.0 < self.gamma <= 1.0:
            out.append(f"gamma={self.gamma} must lie in (-3, 1]")
        if not 0.0 < self.s < 1.0:
            out.append(f"s={self.s} must lie in (0, 1)")
        if not 0.0 < self.theta_min < np.pi / 2:
            out.append(f"theta_min={self.theta_min} must lie in (0, pi/2)")
        if self.b0 <= 0.0:
            out.append(f"b0={self.b0} must be positive")
        if self.gamma <= max(-3.0, -1.5 - 2.0 * self.s):
            out.append(f"gamma={self.gamma} must exceed max(-3, -3/2 - 2s) = "
                       f"{max(-3.0, -1.5 - 2.0 * self.s)}")
        return out

    @property
    def hard(self) -> bool:
        return self.gamma + 2.0 * self.s >= 0.0

    @property
    def gamma2s(self) -> float:
        return self.gamma + 2.0 * self.s

    def angular_density(self, theta):
        """sin(theta) b(cos theta) on the support, 0 elsewhere."""
        th = np.asarray(theta, dtype=float)
        inside = (th >= self.theta_min) & (th <= np.pi / 2)
        return np.where(inside, self.b0 * np.abs(th) ** (-1.0 - 2.0 * self.s), 0.0)


def kernel_eval(spec: KernelSpec, v, u, sigma):
    """B(v-u, sigma); vectorised over leading axes. Zero on the diagonal v = u."""
    w = np.asarray(v, dtype=float) - np.asarray(u, dtype=float)
    sig = np.asarray(sigma, dtype=float)
    r = np.linalg.norm(w, axis=-1)
    safe = np.where(r > 0, r, 1.0)
    cos = np.clip(np.sum(w * sig, axis=-1) / safe, -1.0, 1.0)
    th = np.arccos(cos)
    inside = (th >= spec.theta_min) & (th <= np.pi / 2) & (r > 0)
    sin = np.where(inside, np.sin(th), 1.0)
    b = np.where(inside, spec.b0 * np.where(inside, th, 1.0) ** (-1.0 - 2.0 * spec.s) / sin, 0.0)
    out = np.where(r > 0, safe ** spec.gamma, 0.0) * b
    return out if out.ndim else float(out)


def band_for(spec: KernelSpec, sphere: SphereQuadrature | AngularBand | None) -> AngularBand:
    """Angular rule used by the collision loops for a given sphere order."""
    if isinstance(sphere, AngularBand):
        if abs(sphere.theta_min - spec.theta_min) > 1e-15:
            raise ValueError("angular band does not start at the kernel cutoff")
        return sphere
    n = 6 if sphere is None else sphere.n
    return AngularBand(spec.theta_min, n_theta=n, n_phi=2 * n)


class CollisionGeometry:
    """Packed arguments shared by every compiled collision loop.

    With conservative=True every Gamma output is projected by (I - P), the
    discrete statement that Gamma(f, g) is orthogonal to ker L. Mass,
    momentum and energy of Q(G, F) are then conserved to rounding; the raw
    strong-form quadrature conserves them only up to interpolation error.
    """

    def __init__(self, spec: KernelSpec, grid: VelocityGrid, band: AngularBand, backend=None,
                 conservative: bool = True):
        self.spec, self.grid, self.band = spec, grid, band
        self.conservative = conservative
        self.kern = kernels.get(backend)
        th, wt = band.theta
        cph, sph = band.phi
        wth = wt * spec.angular_density(th) * (2.0 * np.pi / band.n_phi)
        self.args = (grid.N, float(grid.V), float(spec.gamma),
                     np.ascontiguousarray(grid.nodes), np.ascontiguousarray(sqrt_maxwellian(grid.nodes)),
                     np.ascontiguousarray(macro_basis(grid.nodes).T),
                     np.ascontiguousarray(np.cos(th)), np.ascontiguousarray(np.sin(th)),
                     np.ascontiguousarray(wth), np.ascontiguousarray(cph), np.ascontiguousarray(sph))
        self.projector = MacroProjector(grid)
        self.ext = self.grid.size + 5

    def extend(self, f: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(np.concatenate([f, self.projector.coefficients(f)]))

    def contract(self, A: np.ndarray, left: bool = True, right: bool = True) -> np.ndarray:
        """E^T A E with E = [I; coef_map] mapping nodal values to extended vectors."""
        n = self.grid.size
        C = self.projector.coef_map
        if right:
            A = A[:, :n] + A[:, n:] @ C
        if left:
            A = A[:n] + C.T @ A[n:]
        return A

    def remove_macro(self, A: np.ndarray) -> np.ndarray:
        """(I - P) applied to the leading (velocity) axis of A, if conservative."""
        if not self.conservative:
            return A
        P = self.projector
        return A - np.tensordot(P.basis.T, np.tensordot(P.coef_map, A, axes=(1, 0)), axes=(1, 0))

    def gamma_pair(self, f: np.ndarray, g: np.ndarray) -> np.ndarray:
        out = np.zeros(self.grid.size)
        self.kern.gamma_pair(*self.args, self.extend(f), self.extend(g), out)
        return self.remove_macro(out * self.grid.weight)

    def gamma_matrix(self, f: np.ndarray) -> np.ndarray:
        """Matrix M_f with Gamma(f, g) = M_f g for nodal g."""
        out = np.zeros((self.grid.size, self.ext))
        self.kern.gamma_matrix(*self.args, self.extend(f), out)
        return self.remove_macro(self.contract(out, left=False) * self.grid.weight)

    def gamma_dual(self, g: np.ndarray, h: np.ndarray) -> np.ndarray:
        """Vector c with sum_v h(v) Gamma(f, g)(v) = c . f for every nodal f."""
        h = np.asarray(h, dtype=float)
        if self.conservative:
            # sum h (I-P) Gamma = sum ((I-P)^T h) Gamma
            P = self.projector
            h = h - P.coef_map.T @ (P.basis @ h)
        out = np.zeros(self.ext)
        self.kern.gamma_dual(*self.args, self.extend(g), np.ascontiguousarray(h), out)
        return (out[:self.grid.size] + self.projector.coef_map.T @ out[self.grid.size:]) * self.grid.weight


@dataclass
class OperatorMatrix:
    kind: str
    matrix: np.ndarray
    meta: dict = field(default_factory=dict)

    def apply(self, f: np.ndarray) -> np.ndarray:
        return self.matrix @ f

    def form(self, f: np.ndarray, g: np.ndarray | None = None) -> complex:
        g = f if g is None else g
        return np.vdot(g, self.matrix @ f)

    def save(self, path) -> None:
        head = json.dumps({"kind": self.kind, "shape": list(self.matrix.shape), **self.meta},
                          sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(MATRIX_MAGIC + struct.pack("<I", len(head)) + head)
            fh.write(np.ascontiguousarray(self.matrix, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "OperatorMatrix":
        with open(path, "rb") as fh:
            if fh.read(4) != MATRIX_MAGIC:
                raise ValueError(f"{path}: not an operator matrix file")
            (n,) = struct.unpack("<I", fh.read(4))
            meta = json.loads(fh.read(n))
            data = np.frombuffer(fh.read(), dtype="<f8")
        kind = meta.pop("kind")
        shape = tuple(meta.pop("shape"))
        return cls(kind, data.reshape(shape).copy(), meta)


def cache_dir() -> Path:
    root = os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "spectral_boltzmann"
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _provenance(spec: KernelSpec, grid: VelocityGrid, band: AngularBand) -> dict:
    return {"spec": asdict(spec), "grid_hash": grid.hash, "V": grid.V, "N": grid.N,
            "n_theta": band.n_theta, "n_phi": band.n_phi, "n_sigma": band.size}


def _cache_key(meta: dict) -> str:
    return hashlib.sha256(json.dumps(meta, sort_keys=True).encode()).hexdigest()[:16]


_MEMO: dict[str, dict[str, OperatorMatrix]] = {}


def assemble_all(spec: KernelSpec, grid: VelocityGrid, sphere=None, use_cache: bool = True,
                 backend: str | None = None) -> dict[str, OperatorMatrix]:
    """L, L1, L2 and D_GRAM from one pass over the collision triples.

    Results are memoised in-process and cached on disk keyed by the hash of
    (spec, grid, angular rule).
    """
    band = band_for(spec, sphere)
    meta = _provenance(spec, grid, band)
    key = _cache_key(meta)
    if use_cache and key in _MEMO:
        for m in _MEMO[key].values():
            m.meta["cache_hit"] = True
        return _MEMO[key]
    kinds = ("L", "L1", "L2", "D_GRAM")
    paths = {k: cache_dir() / f"{key}_{k}.sbom" for k in kinds} if use_cache else {}
    if use_cache and all(p.exists() for p in paths.values()):
        out = {k: OperatorMatrix.load(p) for k, p in paths.items()}
        for m in out.values():
            m.meta["cache_hit"] = True
        _MEMO[key] = out
        return out

    m = grid.size + 5
    need = 3 * m * m * 8 + 6 * grid.size ** 2 * 8
    if need > MEMORY_BUDGET_BYTES:
        raise BudgetError(f"assembly at N={grid.N} needs {need / 2 ** 30:.2f} GiB "
                          f"(budget {MEMORY_BUDGET_BYTES / 2 ** 30:.2f} GiB)")
    geo = CollisionGeometry(spec, grid, band, backend)
    U11 = np.zeros((m, m))
    A12 = np.zeros((m, m))
    UG = np.zeros((m, m))
    gdiag = np.zeros(m)
    geo.kern.assemble_forms(*geo.args, U11, A12, UG, gdiag)
    h3 = grid.weight
    S11 = U11 + U11.T
    del U11
    L1 = 0.5 * h3 * geo.contract(S11)
    del S11
    L2raw = 0.5 * h3 * geo.contract(A12)
    del A12
    Lraw = L1 + L2raw
    L2 = 0.5 * (L2raw + L2raw.T)
    L1 = 0.5 * (L1 + L1.T)
    L = L1 + L2
    defect = float(np.abs(L - Lraw).max() / np.abs(L).max())
    SG = UG + UG.T
    del UG
    G = h3 * h3 * geo.contract(SG)
    del SG
    G[np.diag_indices(grid.size)] += h3 * h3 * gdiag[:grid.size]
    G = 0.5 * (G + G.T)
    meta = {**meta, "symmetry_defect": defect, "backend": geo.kern.__name__.rsplit(".", 1)[-1]}
    out = {"L": OperatorMatrix("L", L, dict(meta)),
           "L1": OperatorMatrix("L1", L1, dict(meta)),
           "L2": OperatorMatrix("L2", L2, dict(meta)),
           "D_GRAM": OperatorMatrix("D_GRAM", G, dict(meta))}
    if use_cache:
        for k, p in paths.items():
            out[k].save(p)
        _MEMO[key] = out
    return out


def assemble_L(spec: KernelSpec, grid: VelocityGrid, sphere=None, **kw) -> dict[str, OperatorMatrix]:
    ops = assemble_all(spec, grid, sphere, **kw)
    return {k: ops[k] for k in ("L", "L1", "L2")}


def assemble_dnorm_gram(spec: KernelSpec, grid: VelocityGrid, sphere=None,
                        w: WeightSpec | None = None, **kw) -> OperatorMatrix:
    G = assemble_all(spec, grid, sphere, **kw)["D_GRAM"]
    if w is None or w.trivial:
        return G
    wf = weight_field(w, grid)
    return OperatorMatrix("D_GRAM_WEIGHTED", wf[:, None] * G.matrix * wf[None, :],
                          {**G.meta, "weight": w.tag()})


def ball_mass(grid: VelocityGrid, R: float) -> OperatorMatrix:
    """Quadratic form of ||g||^2 over the ball |v| <= R."""
    inside = (grid.speed2 <= R * R).astype(float)
    return OperatorMatrix("BALL_MASS", np.diag(grid.weight * inside), {"R": R, "grid_hash": grid.hash})


def q_collision_direct(spec: KernelSpec, G: np.ndarray, F: np.ndarray, grid: VelocityGrid,
                       sphere=None, budget: int = ORACLE_NODE_BUDGET) -> np.ndarray:
    """Q(G, F) by explicit summation over u-nodes and sigma-nodes (slow oracle).

    Independent of the compiled loops: B comes from kernel_eval on the actual
    sigma vectors, post-collision values from velocity.interpolate. This is the
    raw strong form; it matches q_collision(..., conservative=False).
    """
    band = band_for(spec, sphere)
    proj = MacroProjector(grid)
    nodes = grid.nodes
    smu = sqrt_maxwellian(nodes)
    g_pert = np.asarray(G) / smu
    f_pert = np.asarray(F) / smu
    work = grid.size ** 2 * band.size
    if work > budget * grid.size:
        log.warning("q_collision_direct: %d triples, expect a long run", work)
    out = np.zeros(grid.size, dtype=np.result_type(G, F, float))
    for iv in range(grid.size):
        v = nodes[iv]
        us = np.delete(nodes, iv, axis=0)
        Gu = np.delete(np.asarray(G), iv)
        sig = []
        dsig = []
        for u in us:
            s, w = band.directions(v - u)
            sig.append(s)
            dsig.append(w)
        sig = np.stack(sig)
        dsig = np.stack(dsig)
        uu = us[:, None, :]
        c = 0.5 * (v + uu)
        r = np.linalg.norm(v - uu, axis=-1)[..., None]
        vp = (c + 0.5 * r * sig).reshape(-1, 3)
        up = (c - 0.5 * r * sig).reshape(-1, 3)
        B = kernel_eval(spec, v[None, None, :], uu, sig) * dsig
        Gup = (sqrt_maxwellian(up) * interpolate(g_pert, up, grid, proj)).reshape(B.shape)
        Fvp = (sqrt_maxwellian(vp) * interpolate(f_pert, vp, grid, proj)).reshape(B.shape)
        out[iv] = np.sum(B * (Gup * Fvp - Gu[:, None] * F[iv])) * grid.weight
    return out


def _real_bilinear(fn, f, g):
    """Extend a real bilinear map to complex arguments."""
    if not (np.iscomplexobj(f) or np.iscomplexobj(g)):
        return fn(np.asarray(f, dtype=float), np.asarray(g, dtype=float))
    fr, fi = np.real(f).astype(float), np.imag(f).astype(float)
    gr, gi = np.real(g).astype(float), np.imag(g).astype(float)
    return (fn(fr, gr) - fn(fi, gi)) + 1j * (fn(fr, gi) + fn(fi, gr))


def gamma_eval(spec: KernelSpec, f: np.ndarray, g: np.ndarray, grid: VelocityGrid,
               sphere=None, backend: str | None = None, conservative: bool = True) -> np.ndarray:
    """Gamma(f, g) = mu^{-1/2} Q(sqrt(mu) f, sqrt(mu) g) through the compiled loop."""
    geo = CollisionGeometry(spec, grid, band_for(spec, sphere), backend, conservative)
    return _real_bilinear(geo.gamma_pair, f, g)


def q_collision(spec: KernelSpec, G: np.ndarray, F: np.ndarray, grid: VelocityGrid,
                sphere=None, conservative: bool = True) -> np.ndarray:
    """Fast path for Q(G, F) = sqrt(mu) Gamma(G / sqrt(mu), F / sqrt(mu))."""
    smu = sqrt_maxwellian(grid.nodes)
    return smu * gamma_eval(spec, G / smu, F / smu, grid, sphere, conservative=conservative)


class GammaTensor:
    """Bilinear tensor of Gamma on the nodal space.

    packed=True stores the symmetric part over index pairs a <= b in the
    extended space, which is all that Gamma(f, f) needs; packed=False keeps
    the full (N^3, M, M) tensor for asymmetric pairs.
    """

    def __init__(self, spec: KernelSpec, grid: VelocityGrid, sphere=None, packed: bool = True,
                 backend: str | None = None, conservative: bool = True):
        self.geo = CollisionGeometry(spec, grid, band_for(spec, sphere), backend, conservative)
        self.packed = packed
        m = self.geo.ext
        cols = m * (m + 1) // 2 if packed else m * m
        need = grid.size * cols * 8
        if need > MEMORY_BUDGET_BYTES:
            raise BudgetError(f"Gamma tensor at N={grid.N} needs {need / 2 ** 30:.2f} GiB")
        self.data = np.zeros((grid.size, cols))
        self.geo.kern.gamma_tensor(*self.geo.args, self.data, packed)
        self.data *= grid.weight
        if conservative:
            P = self.geo.projector
            step = max(1, int(2e8 // (8 * grid.size)))
            for j in range(0, cols, step):
                blk = self.data[:, j:j + step]
                blk -= P.basis.T @ (P.coef_map @ blk)
        if packed:
            self._iu = np.triu_indices(m)

    def quadratic(self, F: np.ndarray) -> np.ndarray:
        """Gamma(f, f) for each column f of the real (N^3, n) array F."""
        E = self.geo.projector
        Fe = np.concatenate([F, E.coef_map @ F], axis=0)
        if self.packed:
            a, b = self._iu
            out = np.empty((self.data.shape[0], F.shape[1]))
            chunk = max(1, int(2e8 // (8 * len(a))))
            for j in range(0, F.shape[1], chunk):
                X = Fe[a, j:j + chunk] * Fe[b, j:j + chunk]
                out[:, j:j + chunk] = self.data @ X
            return out
        m = self.geo.ext
        T = self.data.reshape(-1, m, m)
        return np.einsum("vab,an,bn->vn", T, Fe, Fe)

    def bilinear(self, f: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.packed:
            raise ValueError("asymmetric pairs need the full tensor (packed=False)")
        m = self.geo.ext
        T = self.data.reshape(-1, m, m)
        return _real_bilinear(
            lambda x, y: np.einsum("vab,a,b->v", T, self.geo.extend(x), self.geo.extend(y)), f, g)


@dataclass
class CoercivityReport:
    delta0: float
    N: int
    theta_min: float
    pencil_min: float
    pencil_max: float
    kernel_residual: float
    kernel_form_residual: float
    symmetry_defect: float
    delta_q: float | None = None
    C_q: float | None = None
    R: float | None = None
    weight: str | None = None
    L1_delta: float | None = None
    L1_C: float | None = None
    L2_C: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def kernel_residuals(L: OperatorMatrix, grid: VelocityGrid) -> np.ndarray:
    """||L phi|| / ||phi|| for the five collision invariants times sqrt(mu)."""
    basis = macro_basis(grid.nodes)
    return np.array([grid.norm(L.apply(phi)) / grid.norm(phi) for phi in basis])


def _restricted_min(A, B, Q):
    """Smallest generalized eigenvalue of (Q^T A Q, Q^T B Q)."""
    return float(sla.eigh(Q.T @ A @ Q, Q.T @ B @ Q, eigvals_only=True, subset_by_index=[0, 0])[0])


def coercivity_spectrum(L: OperatorMatrix, G_D: OperatorMatrix, projector: MacroProjector,
                        w: WeightSpec | None = None, R: float = 3.0,
                        L1: OperatorMatrix | None = None, L2: OperatorMatrix | None = None,
                        theta_min: float = float("nan"), psd_tol: float = 1e-8) -> CoercivityReport:
    grid = projector.grid
    h3 = grid.weight
    gmin = float(np.linalg.eigvalsh(G_D.matrix)[0])
    if gmin < -psd_tol * np.abs(G_D.matrix).max():
        raise np.linalg.LinAlgError(f"dissipation Gram is not PSD (min eigenvalue {gmin:.3e})")
    Q = projector.orthonormal_complement()
    A = h3 * L.matrix
    ev = sla.eigh(Q.T @ A @ Q, Q.T @ G_D.matrix @ Q, eigvals_only=True)
    basis = macro_basis(grid.nodes)
    form_res = max(abs(h3 * phi @ L.matrix @ phi) / grid.norm(phi) ** 2 for phi in basis)
    rep = CoercivityReport(delta0=float(ev[0]), N=grid.N, theta_min=theta_min,
                           pencil_min=float(ev[0]), pencil_max=float(ev[-1]),
                           kernel_residual=float(kernel_residuals(L, grid).max()),
                           kernel_form_residual=float(form_res),
                           symmetry_defect=float(L.meta.get("symmetry_defect", 0.0)))
    if w is not None:
        rep.delta_q, rep.C_q = weighted_coercivity(L, G_D, w, grid, R)
        rep.R, rep.weight = R, w.tag()
    if L1 is not None:
        A1 = h3 * L1.matrix
        rep.L1_delta = 0.5 * _restricted_min(A1, G_D.matrix, Q)
        lam = float(np.linalg.eigvalsh(A1 - rep.L1_delta * G_D.matrix)[0])
        rep.L1_C = max(0.0, -lam) / h3
    if L2 is not None:
        d = maxwellian(grid.nodes) ** -1e-3
        rep.L2_C = float(np.abs(np.linalg.eigvalsh(d[:, None] * L2.matrix * d[None, :])).max())
    return rep


def weighted_coercivity(L: OperatorMatrix, G_D: OperatorMatrix, w: WeightSpec,
                        grid: VelocityGrid, R: float) -> tuple[float, float]:
    """(delta_q, C) with (Lg, w^2 g) >= delta_q ||w g||_D^2 - C ||g||^2_{B_R}.

    delta_q is half the smallest pencil value on fields vanishing in the
    ball; C is then the least constant restoring positivity, obtained from
    the Schur complement on the ball block.
    """
    h3 = grid.weight
    wf = weight_field(w, grid)
    K = h3 * (wf ** 2)[:, None] * L.matrix
    K = 0.5 * (K + K.T)
    Gw = wf[:, None] * G_D.matrix * wf[None, :]
    ball = grid.speed2 <= R * R
    o = ~ball
    dq = 0.5 * float(sla.eigh(K[np.ix_(o, o)], Gw[np.ix_(o, o)], eigvals_only=True,
                               subset_by_index=[0, 0])[0])
    if dq <= 0:
        return dq, float("inf")
    M = K - dq * Gw
    Moo = M[np.ix_(o, o)]
    Mbo = M[np.ix_(ball, o)]
    S = M[np.ix_(ball, ball)] - Mbo @ np.linalg.solve(Moo, Mbo.T)
    lam = float(np.linalg.eigvalsh(0.5 * (S + S.T))[0])
    return dq, max(0.0, -lam) / h3
