"""Numerical checks of the inequalities and identities behind the analysis.

Every checker returns an InequalityReport (or a list of LedgerEntry for
the energy ledger).  Exact-algebra checks compare with a relative rounding
margin only; quadrature-dependent checks fit a constant and report how the
ratios are distributed.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .collision import (MEMORY_BUDGET_BYTES, CollisionGeometry, GammaTensor, KernelSpec,
                        assemble_all, band_for)
from .norms import (INF, InterpolationSchedule, NormTag, functional_suite, mixed_norm,
                    young_constant)
from .transport import KGrid, Trajectory
from .velocity import (MomentFunctionals, VelocityGrid, WeightSpec, bracket,
                       weight_field)

ROUNDING = 1e-12


@dataclass
class InequalityReport:
    name: str
    samples: int
    violations: int
    max_ratio: float
    summary: dict = field(default_factory=dict)
    constant: float | None = None
    tolerance: float = 0.0
    provenance: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        return asdict(self)


def ratio_summary(ratios) -> dict:
    r = np.asarray(ratios, dtype=float)
    if r.size == 0:
        return {"count": 0}
    q = np.quantile(r, [0.0, 0.5, 0.9, 1.0])
    return {"count": int(r.size), "min": float(q[0]), "median": float(q[1]),
            "p90": float(q[2]), "max": float(q[3])}


def compare(name: str, lhs, rhs, constant: float = 1.0, tolerance: float = ROUNDING,
            **meta) -> InequalityReport:
    """Count samples with lhs > constant * rhs * (1 + tolerance).

    Samples with rhs == 0 are excluded from the ratios but still count as
    violations when lhs is not zero.
    """
    lhs = np.abs(np.asarray(lhs, dtype=float)).ravel()
    rhs = np.asarray(rhs, dtype=float).ravel()
    pos = rhs > 0
    ratios = lhs[pos] / rhs[pos]
    bad = int(np.sum(ratios > constant * (1.0 + tolerance)))
    bad += int(np.sum(lhs[~pos] > 0))
    return InequalityReport(name, int(lhs.size), bad,
                            float(ratios.max()) if ratios.size else 0.0,
                            ratio_summary(ratios), constant, tolerance, **meta)


def run_checks(jobs: dict, threads: int = 1) -> dict:
    """Run independent checks and merge the results by name."""
    names = sorted(jobs)
    if threads <= 1:
        return {n: jobs[n]() for n in names}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {n: pool.submit(jobs[n]) for n in names}
        return {n: futures[n].result() for n in names}


# ---------------------------------------------------------------------------
# trilinear bounds

def random_field(grid: VelocityGrid, rng: np.random.Generator, degree: int = 3,
                 decay: float = 0.25) -> np.ndarray:
    """Random polynomial of the given degree times exp(-decay |v|^2).

    The field does not depend on the resolution, so ratios built from it
    converge under grid refinement.
    """
    v = grid.nodes
    out = np.zeros(grid.size)
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            for c in range(degree + 1 - a - b):
                out += rng.normal() * v[:, 0] ** a * v[:, 1] ** b * v[:, 2] ** c
    return out * np.exp(-decay * grid.speed2)


def _d_norm(G: np.ndarray, x: np.ndarray) -> float:
    x = np.asarray(x)
    return math.sqrt(max(float(np.real(np.conj(x) @ G @ x)), 0.0))


class GammaOps:
    """Gamma(f, .) as a matrix and the dual map of (g, h), complex-bilinear.

    With use_tensor the full (N^3, M, M) tensor is built once and both maps
    become contractions; otherwise each call runs the compiled loop.
    """

    def __init__(self, spec: KernelSpec, grid: VelocityGrid, sphere=None, use_tensor: bool | None = None):
        self.geo = CollisionGeometry(spec, grid, band_for(spec, sphere))
        m = self.geo.ext
        if use_tensor is None:
            use_tensor = grid.size * m * m * 8 <= MEMORY_BUDGET_BYTES // 2
        self.T = None
        if use_tensor:
            self.T = GammaTensor(spec, grid, sphere, packed=False).data.reshape(grid.size, m, m)

    def _real_matrix(self, f):
        if self.T is None:
            return self.geo.gamma_matrix(f)
        A = np.tensordot(self.geo.extend(f), self.T, axes=([0], [1]))
        return self.geo.contract(A, left=False)

    def _real_dual(self, g, h):
        if self.T is None:
            return self.geo.gamma_dual(g, h)
        c = np.einsum("vab,v,b->a", self.T, h, self.geo.extend(g), optimize=True)
        n = self.geo.grid.size
        return c[:n] + self.geo.projector.coef_map.T @ c[n:]

    def matrix(self, f: np.ndarray) -> np.ndarray:
        """M_f with Gamma(f, g) = M_f g."""
        if np.iscomplexobj(f):
            return self._real_matrix(f.real) + 1j * self._real_matrix(f.imag)
        return self._real_matrix(f)

    def dual(self, g: np.ndarray, h: np.ndarray) -> np.ndarray:
        """c with sum_v h(v) Gamma(f, g)(v) = c . f."""
        if not (np.iscomplexobj(g) or np.iscomplexobj(h)):
            return self._real_dual(np.real(g), np.real(h))
        g = np.asarray(g, dtype=complex)
        h = np.asarray(h, dtype=complex)
        d = self._real_dual
        return (d(g.real, h.real) - d(g.imag, h.imag)
                + 1j * (d(g.real, h.imag) + d(g.imag, h.real)))


def _whitening(G: np.ndarray, rel: float = 1e-12) -> np.ndarray:
    """W with ||W y||_D = |y| on the numerically nondegenerate subspace."""
    lam, Q = np.linalg.eigh(G)
    keep = lam > rel * lam.max()
    return Q[:, keep] / np.sqrt(lam[keep])


def trilinear_sup(ops: GammaOps, G: np.ndarray, iters: int = 12, starts: int = 2,
                  complex_fields: bool = True, seed: int = 0) -> float:
    """Lower estimate of sup |(Gamma(f, g), h)| / (||f|| ||g||_D ||h||_D).

    Alternating maximization: for fixed f the sup over (g, h) is the top
    singular value of the whitened bilinear form; for fixed (g, h) the
    optimal f is the normalized conjugate gradient from the dual loop.
    """
    grid = ops.geo.grid
    h3 = grid.weight
    W = _whitening(G)
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(starts):
        f = random_field(grid, rng)
        if complex_fields:
            f = f + 1j * random_field(grid, rng)
        f = f / grid.norm(f)
        value = 0.0
        for _ in range(iters):
            K = h3 * (W.T @ ops.matrix(f) @ W)
            U, S, Vh = np.linalg.svd(K)
            g = W @ np.conj(Vh[0])
            h = W @ U[:, 0]
            c = h3 * ops.dual(g, np.conj(h))
            new = float(np.linalg.norm(c) / math.sqrt(h3))
            f = np.conj(c) / new / math.sqrt(h3) if complex_fields else np.real(c) / new / math.sqrt(h3)
            if new <= value * (1.0 + 1e-4):
                value = max(value, new)
                break
            value = new
        best = max(best, value, float(S[0]))
    return best


def check_trilinear(spec: KernelSpec, grid: VelocityGrid, sphere=None, samples: int = 32,
                    seed: int = 0, n_f: int = 4, sup: bool = False,
                    fixed_f: np.ndarray | None = None, same_gh: bool = False,
                    ops: GammaOps | None = None) -> InequalityReport:
    """Fitted constant of |(Gamma(f, g), h)| <= C ||f|| ||g||_D ||h||_D over random triples.

    The triples share n_f first arguments (one collision matrix each); with
    sup=True an alternating-maximization estimate of the supremum over real
    and complex fields is added to `extra`.
    """
    G = assemble_all(spec, grid, sphere)["D_GRAM"].matrix
    ops = ops or GammaOps(spec, grid, sphere, use_tensor=sup and None)
    rng = np.random.default_rng(seed)
    n_f = 1 if fixed_f is not None else max(1, min(n_f, samples))
    lhs, rhs = [], []
    for i in range(n_f):
        f = random_field(grid, rng) if fixed_f is None else fixed_f
        M = ops.matrix(f)
        for _ in range(samples // n_f + (i < samples % n_f)):
            g = random_field(grid, rng)
            h = g if same_gh else random_field(grid, rng)
            lhs.append(abs(grid.inner(M @ g, h)))
            rhs.append(grid.norm(f) * _d_norm(G, g) * _d_norm(G, h))
    lhs, rhs = np.array(lhs), np.array(rhs)
    pos = rhs > 0
    fitted = float((lhs[pos] / rhs[pos]).max()) if pos.any() else 0.0
    rep = compare("trilinear", lhs, rhs, constant=fitted,
                  provenance={"N": grid.N, "V": grid.V, "theta_min": spec.theta_min,
                              "gamma": spec.gamma, "s": spec.s, "samples": len(lhs), "seed": seed})
    if sup:
        rep.extra["sup_real"] = trilinear_sup(ops, G, complex_fields=False, seed=seed)
        rep.extra["sup_complex"] = trilinear_sup(ops, G, complex_fields=True, seed=seed)
    return rep


def _lattice_offsets(kgrid: KGrid) -> np.ndarray:
    n = 2 * kgrid.half_width + 1
    return np.stack(np.unravel_index(np.arange(kgrid.size), (n, n, n)), axis=-1) - kgrid.half_width


def _lattice_index(J: np.ndarray, m: int) -> np.ndarray:
    n = 2 * m + 1
    ok = np.all(np.abs(J) <= m, axis=-1)
    K = J + m
    return np.where(ok, (K[..., 0] * n + K[..., 1]) * n + K[..., 2], -1)


def gamma_hat_pair(ops: GammaOps, fhat: np.ndarray, ghat: np.ndarray,
                   kgrid: KGrid) -> np.ndarray:
    """Gamma_hat(f, g)(k) = sum_l Gamma(f(k - l), g(l)) dk^3 over the lattice."""
    J = _lattice_offsets(kgrid)
    out = np.zeros(fhat.shape, dtype=complex)
    active_g = np.nonzero(np.abs(ghat).max(axis=1) > 0)[0]
    for j in np.nonzero(np.abs(fhat).max(axis=1) > 0)[0]:
        M = ops.matrix(fhat[j])
        Y = ghat[active_g] @ M.T
        target = _lattice_index(J[j] + J[active_g], kgrid.half_width)
        ok = target >= 0
        np.add.at(out, target[ok], Y[ok])
    return out * kgrid.spacing ** 3


def check_gamma_hat_bound(fhat: np.ndarray, kgrid: KGrid, spec: KernelSpec, grid: VelocityGrid,
                          constant: float, ghat: np.ndarray | None = None,
                          hhat: np.ndarray | None = None, sphere=None,
                          tolerance: float = ROUNDING, ops: GammaOps | None = None) -> InequalityReport:
    """|(Gamma_hat(f, g)(k), h(k))| <= C sum_l ||f(k-l)|| ||g(l)||_D ||h(k)||_D dk^3 per k."""
    if kgrid.mode != "lattice":
        raise ValueError("the convolution bound needs a lattice k-grid")
    ghat = fhat if ghat is None else ghat
    hhat = ghat if hhat is None else hhat
    G = assemble_all(spec, grid, sphere)["D_GRAM"].matrix
    ops = ops or GammaOps(spec, grid, sphere)
    conv = gamma_hat_pair(ops, fhat, ghat, kgrid)
    lhs = np.abs(grid.weight * np.sum(np.conj(hhat) * conv, axis=1))
    fn = np.sqrt(grid.weight * np.sum(np.abs(fhat) ** 2, axis=1))
    gd = np.array([_d_norm(G, x) for x in ghat])
    hd = np.array([_d_norm(G, x) for x in hhat])
    J = _lattice_offsets(kgrid)
    conv_norm = np.zeros(kgrid.size)
    for l in np.nonzero(gd > 0)[0]:
        src = _lattice_index(J - J[l], kgrid.half_width)
        ok = src >= 0
        conv_norm[ok] += fn[src[ok]] * gd[l]
    rhs = conv_norm * kgrid.spacing ** 3 * hd
    rep = compare("gamma_hat_bound", lhs, rhs, constant=constant, tolerance=tolerance,
                  provenance={"N": grid.N, "modes": kgrid.size, "dk": kgrid.spacing,
                              "theta_min": spec.theta_min})
    rep.extra["lhs_max"] = float(lhs.max())
    return rep


def check_weighted_gamma(spec: KernelSpec, grid: VelocityGrid, w: WeightSpec, samples: int = 24,
                         seed: int = 0, sphere=None, zero_g: bool = False) -> InequalityReport:
    """Fitted constant of the weighted bound for |(Gamma(f, g), w^2 h)|.

    The right-hand side is ||w h||_D times the sum of the three product
    terms built from <v>^{gamma/2+s}, w and the D-norm.
    """
    if spec.hard:
        raise ValueError("the weighted bound is stated for soft potentials (gamma + 2s < 0)")
    G = assemble_all(spec, grid, sphere)["D_GRAM"].matrix
    geo = CollisionGeometry(spec, grid, band_for(spec, sphere))
    wf = weight_field(w, grid)
    m = bracket(grid.nodes) ** (spec.gamma / 2.0 + spec.s)
    rng = np.random.default_rng(seed)
    norm = grid.norm
    lhs, rhs = [], []
    for _ in range(samples):
        f, g, h = (random_field(grid, rng) for _ in range(3))
        if zero_g:
            g = np.zeros(grid.size)
        lhs.append(abs(grid.inner(geo.gamma_pair(f, g), wf ** 2 * h)))
        t1 = norm(m * wf * f) * _d_norm(G, g) + norm(m * g) * _d_norm(G, wf * f)
        t2 = min(norm(wf * f) * norm(m * g), norm(g) * norm(m * wf * f))
        t3 = norm(wf * g) * norm(m * wf * f)
        rhs.append((t1 + t2 + t3) * _d_norm(G, wf * h))
    lhs, rhs = np.array(lhs), np.array(rhs)
    pos = rhs > 0
    fitted = float((lhs[pos] / rhs[pos]).max()) if pos.any() else 0.0
    return compare("weighted_gamma", lhs, rhs, constant=fitted,
                   provenance={"N": grid.N, "weight": w.tag(), "gamma": spec.gamma, "s": spec.s,
                               "theta_min": spec.theta_min, "samples": samples, "seed": seed})


# ---------------------------------------------------------------------------
# macro moment system

class StrideError(ValueError):
    """Snapshot spacing too coarse for centered time differences."""


@dataclass
class MacroResidualReport:
    residuals: dict            # equation -> (n_t - 2, nk, ...) residual array
    scales: dict               # equation -> RMS of the largest term
    rms: dict                  # equation -> RMS residual
    dt_snap: float

    def relative(self) -> dict:
        return {e: self.rms[e] / self.scales[e] if self.scales[e] > 0 else 0.0 for e in self.rms}

    def to_dict(self) -> dict:
        return {"rms": self.rms, "scales": self.scales, "relative": self.relative(),
                "dt_snap": self.dt_snap}


def _rms(x) -> float:
    x = np.asarray(x)
    return float(np.sqrt(np.mean(np.abs(x) ** 2))) if x.size else 0.0


def macro_residual(traj: Trajectory, L: np.ndarray | None = None, source=None,
                   max_phase: float = 1.0) -> MacroResidualReport:
    """Residuals of the five macro moment equations along a trajectory.

    With r = -i (v.k) (I-P) f and h = -L (I-P) f + H:

      1. d_t a + i k.b = 0
      2. d_t b + i k (a + 2c) + i k.Theta = 0
      3. d_t c + (1/3) i k.b + (5/3) i k.Lambda = 0
      4. d_t (Theta_jm + 2c delta_jm) + i k_j b_m + i k_m b_j = Theta_jm(r + h)
      5. d_t Lambda_j + i k_j c = Lambda_j(r + h)

    Theta and Lambda act on (I-P) f; H is `source`, either an array of the
    trajectory's shape or a callable on one snapshot.  Time derivatives are
    centered differences on a uniform snapshot grid.
    """
    times = traj.times
    if len(times) < 3:
        raise StrideError("need at least three snapshots for centered differences")
    steps = np.diff(times)
    ds = float(steps.mean())
    if np.abs(steps - ds).max() > 1e-9 * max(ds, 1.0):
        raise StrideError("snapshot times must be uniformly spaced")
    grid, kg = traj.grid, traj.kgrid
    k = kg.points
    rate = float(np.abs(k).sum(axis=1).max()) * grid.V
    if L is not None:
        rate += float(np.abs(np.linalg.eigvalsh(0.5 * (L + L.T))).max())
    if ds * rate > max_phase:
        raise StrideError(f"snapshot spacing {ds:.3g} too coarse: spacing x rate = {ds * rate:.3g} "
                          f"exceeds {max_phase}; store snapshots more often")
    mom = MomentFunctionals(grid)
    X = traj.macro
    a, b, c = X[..., 0], X[..., 1:4], X[..., 4]
    micro = traj.micro
    Th = mom.theta(micro)                       # (n_t, nk, 3, 3)
    La = mom.lam(micro)                         # (n_t, nk, 3)
    vk = k @ grid.nodes.T                       # (nk, nv)
    rh = -1j * vk[None] * micro
    if L is not None:
        rh = rh - micro @ L.T
    if source is not None:
        H = source if isinstance(source, np.ndarray) else np.array([source(s) for s in traj.states])
        rh = rh + H
    Th_src, La_src = mom.theta(rh), mom.lam(rh)

    def dt(x):
        return (x[2:] - x[:-2]) / (2.0 * ds)

    mid = slice(1, -1)
    ik = 1j * k[None]                           # (1, nk, 3)
    eye = np.eye(3)
    terms = {
        "eq1": [dt(a), np.sum(ik * b[mid], axis=-1)],
        "eq2": [dt(b), ik * (a[mid] + 2 * c[mid])[..., None], np.einsum("tkm,tkjm->tkj", ik.repeat(len(a) - 2, 0), Th[mid])],
        "eq3": [dt(c), np.sum(ik * b[mid], axis=-1) / 3.0, (5.0 / 3.0) * np.sum(ik * La[mid], axis=-1)],
        "eq4": [dt(Th + 2 * c[..., None, None] * eye),
                ik[..., :, None] * b[mid][..., None, :] + ik[..., None, :] * b[mid][..., :, None],
                -Th_src[mid]],
        "eq5": [dt(La), ik * c[mid][..., None], -La_src[mid]],
    }
    residuals, scales, rms = {}, {}, {}
    for name, parts in terms.items():
        res = sum(parts)
        residuals[name] = res
        scales[name] = max(_rms(p) for p in parts)
        rms[name] = _rms(res)
    return MacroResidualReport(residuals, scales, rms, ds)


# ---------------------------------------------------------------------------
# interpolation schedule

@dataclass(frozen=True)
class SampleGrid:
    """Log-spaced sample sets: t in [0, t_max], |k| in [k_min, 1], |v| in [0, v_max]."""

    n_t: int = 100
    n_k: int = 100
    n_v: int = 100
    t_max: float = 1e4
    k_min: float = 1e-3
    v_max: float = 1e3

    def t(self) -> np.ndarray:
        return np.expm1(np.linspace(0.0, math.log1p(self.t_max), self.n_t))

    def k(self) -> np.ndarray:
        return np.logspace(math.log10(self.k_min), 0.0, self.n_k)

    def v(self) -> np.ndarray:
        return np.concatenate([[0.0], np.logspace(-2, math.log10(self.v_max), self.n_v - 1)])


def _split_report(name, lhs, A, B, theta, eta, c_scale, extra=None) -> InequalityReport:
    C = young_constant(theta, eta)
    rep = compare(name, lhs, eta * A + c_scale * C * B)
    rep.constant = 1.0
    rep.extra = {"theta": theta, "eta": eta, "C_eta": C, "c_scale": c_scale, **(extra or {})}
    return rep


def schedule_identities(schedule: InterpolationSchedule) -> InequalityReport:
    """Exponent identities of the hard and soft splits, checked to rounding."""
    s = schedule
    pc = s.p_conj
    checks = {
        "theta_hard*omega=1": (s.theta_hard * s.omega, 1.0),
        "sigma-omega=-1-eps": (s.sigma - s.omega, -1.0 - s.eps),
    }
    if pc != INF:
        checks["p'(1-theta)/theta=3-p'eps"] = (s.frequency_exponent, 3.0 - pc * s.eps)
    if s.soft:
        r, r1, r2 = s.r_value, s.r1_value, s.r2_value
        th_k = (1.0 - r) / s.omega
        th1 = 1.0 - 1.0 / r1
        th2 = 1.0 - 1.0 / r2
        checks.update({
            "E:time": ((1 - s.theta_E) * s.sigma + s.theta_E * (-1 - s.eps + r), s.sigma - 1 + r),
            "k-split:time": ((1 - th_k) * s.sigma + th_k * (s.sigma - s.omega), s.sigma - 1 + r),
            "Ec:time": ((1 - th1) * s.sigma + th1 * (s.sigma - r1 / (r1 - 1)), s.sigma - 1),
            "Ec:velocity": ((1 - th1) * -1.0 + th1 / (r1 - 1), 0.0),
            "macro:time": ((1 - th2) * s.sigma + th2 * (s.sigma - r2 / (r2 - 1)), s.sigma - 1),
            "macro:frequency": ((1 - th2) * 2.0 - th2 * 2.0 / (r2 - 1), 0.0),
        })
        if pc != INF:
            checks["k-split integrable <=> r < p'eps/(3+p')"] = (
                float(pc * (1 - th_k) / th_k < 3.0), float(r < pc * s.eps / (3.0 + pc)))
            checks["macro integrable <=> r2 > (4p-3)/(3p-3)"] = (
                float(pc / (r2 - 1) < 3.0), float(r2 > s.r2_min))
    diffs = {k: abs(a - b) for k, (a, b) in checks.items()}
    bad = sum(d > ROUNDING * max(1.0, abs(checks[k][1])) for k, d in diffs.items())
    return InequalityReport("schedule_identities", len(checks), bad, 0.0,
                            {"max_abs_difference": max(diffs.values())}, tolerance=ROUNDING,
                            extra={k: [float(a), float(b)] for k, (a, b) in checks.items()})


def check_interpolation(schedule: InterpolationSchedule, etas=(0.1, 0.01),
                        samples: SampleGrid | None = None, gamma2s: float = -1.0,
                        c_scale: float = 1.0) -> dict:
    """Young splits of the schedule with closed-form C_eta over log-spaced samples.

    gamma2s is gamma + 2s for the soft splits; c_scale < 1 shrinks the
    constant below its optimum (negative tests).
    """
    errs = schedule.violations()
    if errs:
        raise ValueError("; ".join(errs))
    sg = samples or SampleGrid()
    s = schedule
    T, K = np.meshgrid(sg.t(), sg.k(), indexing="ij")
    one_t = 1.0 + T
    out = {"identities": schedule_identities(schedule)}
    for eta in etas:
        th = s.theta_hard
        out[f"hard[eta={eta}]"] = _split_report(
            "hard", one_t ** (s.sigma - 1.0),
            one_t ** s.sigma * K ** 2, one_t ** (s.sigma - s.omega) * K ** (-2.0 * (1 - th) / th),
            th, eta, c_scale)
        if not s.soft:
            continue
        if gamma2s >= 0:
            raise ValueError("soft splits need gamma + 2s < 0")
        a = abs(gamma2s)
        r, r1, r2, e2 = s.r_value, s.r1_value, s.r2_value, eta * eta
        Tv, Vv = np.meshgrid(sg.t(), sg.v(), indexing="ij")
        jv = np.sqrt(1.0 + Vv ** 2)
        in_E = jv ** a <= (1.0 + Tv) ** r
        wv = jv ** gamma2s
        tE = s.theta_E
        rep = _split_report("soft_E", (1.0 + Tv[in_E]) ** (s.sigma - 1.0),
                            wv[in_E] * (1.0 + Tv[in_E]) ** s.sigma,
                            wv[in_E] * (1.0 + Tv[in_E]) ** (-1.0 - s.eps + r), tE, e2, c_scale)
        rep.extra["E_samples"] = int(in_E.sum())
        out[f"soft_E[eta={eta}]"] = rep
        th1 = 1.0 - 1.0 / r1
        Tc, Vc = (1.0 + Tv[~in_E]), jv[~in_E]
        rep = _split_report("soft_Ec", Tc ** (s.sigma - 1.0), Tc ** s.sigma * Vc ** gamma2s,
                            Tc ** (s.sigma - r1 / (r1 - 1)) * Vc ** (a / (r1 - 1)), th1, e2, c_scale)
        rep.extra["Ec_samples"] = int((~in_E).sum())
        out[f"soft_Ec[eta={eta}]"] = rep
        th_k = (1.0 - r) / s.omega
        out[f"soft_k[eta={eta}]"] = _split_report(
            "soft_k", one_t ** (s.sigma - 1.0 + r), one_t ** s.sigma * K ** 2,
            one_t ** (s.sigma - s.omega) * K ** (-2.0 * (1 - th_k) / th_k), th_k, e2, c_scale)
        th2 = 1.0 - 1.0 / r2
        out[f"macro[eta={eta}]"] = _split_report(
            "macro", one_t ** (s.sigma - 1.0), one_t ** s.sigma * K ** 2,
            one_t ** (s.sigma - r2 / (r2 - 1)) * K ** (-2.0 / (r2 - 1)), th2, e2, c_scale)
    return out


# ---------------------------------------------------------------------------
# energy ledger

@dataclass
class LedgerEntry:
    id: str
    lhs: float
    rhs: dict
    c_star: float
    degenerate: bool = False
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _initial_norm(traj: Trajectory, p: float, weight: WeightSpec | None = None) -> float:
    first = traj.window(0.0)
    return mixed_norm(first, NormTag(p=p, time="sup", weight=weight))


def _entry(id_, lhs, rhs, provenance) -> LedgerEntry:
    values = {k: float(v) for k, v in rhs.items()}
    for k, v in [("lhs", lhs), *values.items()]:
        if not (math.isfinite(v) and v >= 0):
            raise ValueError(f"ledger entry {id_}: {k} = {v} is not finite and nonnegative")
    total = math.fsum(values.values())
    if total == 0.0:
        return LedgerEntry(id_, float(lhs), values, 0.0, True, provenance)
    return LedgerEntry(id_, float(lhs), values, float(lhs) / total, False, provenance)


def energy_ledger(traj: Trajectory, schedule: InterpolationSchedule, grams: dict,
                  weight: WeightSpec | None = None, nonlinear: bool = True,
                  provenance: dict | None = None) -> list[LedgerEntry]:
    """One LedgerEntry per a priori inequality evaluated on a trajectory.

    nonlinear=False drops the quadratic right-hand-side terms, which vanish
    for the linearized flow.  A weight adds the soft-potential entries.
    """
    if "D_GRAM" not in grams:
        raise KeyError("energy ledger needs functional inputs: missing matrix D_GRAM")
    p = schedule.p
    fs = functional_suite(traj, schedule, grams, weight)
    prov = {"N": traj.grid.N, "V": traj.grid.V, "T": float(traj.times[-1]), "dt": traj.dt,
            "modes": traj.kgrid.size, "p": p, "eps": schedule.eps, **(provenance or {})}
    f0_1 = _initial_norm(traj, 1.0)
    f0_p = _initial_norm(traj, p)
    entries = []
    rhs_l1 = {"f0_L1k": f0_1}
    rhs_lp = {"f0_Lpk": f0_p}
    if nonlinear:
        dnorm = mixed_norm(traj, NormTag(p=1.0, time="L2", vnorm="D"), grams)
        rhs_l1["nonlinear"] = mixed_norm(traj, NormTag(p=1.0, time="sup")) * dnorm
        rhs_lp["nonlinear"] = mixed_norm(traj, NormTag(p=p, time="sup")) * dnorm
    entries.append(_entry("apriori-L1k", fs["apriori_L1_lhs"], rhs_l1, prov))
    entries.append(_entry("apriori-Lpk", fs["apriori_Lp_lhs"], rhs_lp, prov))
    entries.append(_entry("hard-c1-timeweighted", fs["thm_hc_c1_lhs"], {"f0_L1k": f0_1, "f0_Lpk": f0_p}, prov))
    entries.append(_entry("hard-c2-Lpk", fs["thm_hc_c2_lhs"], {"f0_Lpk": f0_p}, prov))
    if weight is not None and not weight.trivial:
        lifted = WeightSpec(weight.ell + schedule.j_value, weight.q, weight.gamma2s)
        wf0_1 = _initial_norm(traj, 1.0, weight)
        wf0_p = _initial_norm(traj, p, weight)
        entries.append(_entry("soft-E1D1", fs["E1"] + fs["D1"], {"wf0_L1k": wf0_1}, prov))
        entries.append(_entry("soft-EpDp", fs["Ep"] + fs["Dp"], {"wf0_Lpk": wf0_p}, prov))
        entries.append(_entry("soft-scriptED", fs["scriptE"] + fs["scriptD"],
                              {"wjf0_L1k": _initial_norm(traj, 1.0, lifted),
                               "wjf0_Lpk": _initial_norm(traj, p, lifted)}, prov))
    return sorted(entries, key=lambda e: e.id)


def ledger_json(entries: list[LedgerEntry]) -> str:
    return json.dumps([e.to_dict() for e in entries], indent=2, sort_keys=True)


def ledger_table(entries: list[LedgerEntry], fmt: str = "csv") -> str:
    """Summary table: inequality id, C*, LHS, RHS total, degenerate flag."""
    rows = [(e.id, e.c_star, e.lhs, math.fsum(e.rhs.values()), e.degenerate) for e in entries]
    head = ("id", "c_star", "lhs", "rhs_total", "degenerate")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(head)
        for r in rows:
            w.writerow([r[0], f"{r[1]:.6e}", f"{r[2]:.6e}", f"{r[3]:.6e}", r[4]])
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        lines += [f"| {r[0]} | {r[1]:.4g} | {r[2]:.4g} | {r[3]:.4g} | {r[4]} |" for r in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown table format {fmt!r}")
