"""Mixed frequency/time/velocity norms, energy functionals and decay fits.

A norm is described by a NormTag and evaluated on a Trajectory in three
passes: a velocity norm per (snapshot, mode), a time aggregation per mode
(sup over snapshots or trapezoidal L^2_T), and a k-aggregation with the
k-grid weights (L^p_k, p = inf meaning the max over nodes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from .transport import DecayEnvelope, KGrid, Trajectory, multiplier
from .velocity import WeightSpec, weight_field

INF = math.inf


@dataclass(frozen=True)
class NormTag:
    p: float = 1.0
    region: str = "all"          # all | low (|k|<=1) | high (|k|>=1, ties excluded)
    time: str = "sup"            # sup | L2 | pointwise
    vnorm: str = "L2"            # L2 | D | macro
    part: str = "full"           # full | micro
    weight: WeightSpec | None = None
    sigma: float | None = None   # time weight (1+t)^{sigma/2}
    multiplier: bool = False     # |k| / <k>

    def __post_init__(self):
        if not (self.p >= 1.0):
            raise ValueError("k-exponent must be >= 1")
        if self.region not in ("all", "low", "high"):
            raise ValueError(f"unknown k-region {self.region!r}")
        if self.time not in ("sup", "L2", "pointwise"):
            raise ValueError(f"unknown time aggregation {self.time!r}")
        if self.vnorm not in ("L2", "D", "macro"):
            raise ValueError(f"unknown velocity norm {self.vnorm!r}")
        if self.part not in ("full", "micro"):
            raise ValueError(f"unknown part {self.part!r}")


def region_mask(kgrid: KGrid, region: str) -> np.ndarray:
    low = kgrid.low_mask()
    if region == "all":
        return np.ones(kgrid.size, dtype=bool)
    return low if region == "low" else ~low


def k_aggregate(values: np.ndarray, weights: np.ndarray, p: float) -> np.ndarray:
    """L^p_k of nonnegative values (last axis = modes)."""
    if values.shape[-1] == 0:
        return np.zeros(values.shape[:-1])
    if p == INF:
        return values.max(axis=-1)
    if p == 1.0:
        return values @ weights
    return (values ** p @ weights) ** (1.0 / p)


def time_aggregate(values: np.ndarray, times: np.ndarray, how: str) -> np.ndarray:
    """Aggregate (n_snap, nk) values over snapshots."""
    if how == "sup":
        return values.max(axis=0)
    if how == "L2":
        if len(times) < 2:
            return np.zeros(values.shape[1])
        return np.sqrt(trapezoid(values ** 2, times, axis=0))
    return values


class VelocityNorms:
    """Per-(snapshot, mode) velocity norms with cached Gram forms."""

    def __init__(self, traj: Trajectory, grams: dict | None = None):
        self.traj = traj
        self.grams = grams or {}
        self._weighted: dict = {}

    def _gram(self, weight: WeightSpec | None) -> np.ndarray:
        if "D_GRAM" not in self.grams:
            raise KeyError("missing matrix D_GRAM: assemble the dissipation Gram first")
        G = self.grams["D_GRAM"]
        G = G.matrix if hasattr(G, "matrix") else G
        if weight is None or weight.trivial:
            return G
        key = weight.tag()
        if key not in self._weighted:
            wf = weight_field(weight, self.traj.grid)
            self._weighted[key] = wf[:, None] * G * wf[None, :]
        return self._weighted[key]

    def values(self, tag: NormTag) -> np.ndarray:
        tr = self.traj
        if tag.vnorm == "macro":
            return np.linalg.norm(tr.macro, axis=-1)
        X = tr.micro if tag.part == "micro" else tr.states
        wtrivial = tag.weight is None or tag.weight.trivial
        if tag.vnorm == "L2":
            if not wtrivial:
                X = X * weight_field(tag.weight, tr.grid)
            return np.sqrt(tr.grid.weight * np.sum(np.abs(X) ** 2, axis=-1))
        G = self._gram(tag.weight)
        Y = X @ G
        return np.sqrt(np.maximum(np.sum((np.conj(X) * Y).real, axis=-1), 0.0))


def mixed_norm(traj: Trajectory, tag: NormTag, grams: dict | None = None,
               vn: VelocityNorms | None = None):
    """Evaluate one mixed norm; pointwise-in-time tags return a time series."""
    vn = vn or VelocityNorms(traj, grams)
    vals = vn.values(tag)
    if tag.sigma is not None:
        vals = vals * ((1.0 + traj.times) ** (tag.sigma / 2.0))[:, None]
    if tag.multiplier:
        vals = vals * multiplier(traj.kgrid.points)[None, :]
    mask = region_mask(traj.kgrid, tag.region)
    agg = time_aggregate(vals, traj.times, tag.time)
    out = k_aggregate(agg[..., mask], traj.kgrid.weights[mask], tag.p)
    return out if tag.time == "pointwise" else float(out)


@dataclass(frozen=True)
class InterpolationSchedule:
    """Exponent bookkeeping for the time-frequency(-velocity) interpolations.

    sigma = 3(1 - 1/p) - 2 eps is the time-weight exponent, omega = 4 - 3/p - eps
    the loss in the hard split, theta_hard = 1/omega; the soft case adds the
    velocity split exponent r, the extra weight order j and the auxiliary
    exponents r1 (large-velocity split) and r2 (macro split).
    """

    p: float = INF
    eps: float = 0.1
    ell: float = 0.0
    q: float = 0.0
    j: float | None = None
    r: float | None = None
    r1: float | None = None
    r2: float | None = None
    soft: bool = False

    def __post_init__(self):
        errors = self.violations()
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def p_conj(self) -> float:
        return 1.0 if self.p == INF else (INF if self.p == 1.0 else self.p / (self.p - 1.0))

    @property
    def inv_p(self) -> float:
        return 0.0 if self.p == INF else 1.0 / self.p

    @property
    def sigma(self) -> float:
        return 3.0 * (1.0 - self.inv_p) - 2.0 * self.eps

    @property
    def omega(self) -> float:
        return 4.0 - 3.0 * self.inv_p - self.eps

    @property
    def theta_hard(self) -> float:
        return 1.0 / self.omega

    @property
    def r_max(self) -> float:
        pc = self.p_conj
        return pc * self.eps / (3.0 + pc)

    @property
    def r_value(self) -> float:
        return 0.5 * self.r_max if self.r is None else self.r

    @property
    def j_value(self) -> float:
        return self.sigma / (2.0 * self.r_value) + 1.0 if self.j is None else self.j

    @property
    def r1_value(self) -> float:
        return 1.0 + 1.0 / (self.sigma + 0.5 * self.eps) if self.r1 is None else self.r1

    @property
    def r2_min(self) -> float:
        return 4.0 / 3.0 if self.p == INF else (4.0 * self.p - 3.0) / (3.0 * self.p - 3.0)

    @property
    def r2_value(self) -> float:
        return self.r2_min + 0.1 if self.r2 is None else self.r2

    @property
    def theta_E(self) -> float:
        r = self.r_value
        return (1.0 - r) / (self.sigma + self.eps + 1.0 - r)

    @property
    def frequency_exponent(self) -> float:
        """p' (1 - theta) / theta of the hard split; must stay below 3."""
        th = self.theta_hard
        return self.p_conj * (1.0 - th) / th

    def violations(self) -> list[str]:
        out = []
        if not (self.p > 1.5):
            out.append(f"p={self.p}: sigma>1 requires p>3/2")
        elif self.eps <= 0 or self.eps >= 1.0 - 1.5 * self.inv_p:
            out.append(f"eps={self.eps} must lie in (0, 1 - 3/(2p)) so that sigma>1")
        if out:
            return out
        if self.soft:
            r = self.r_value
            if not 0.0 < r < self.r_max:
                out.append(f"r={r} must lie in (0, p' eps/(3+p')) = (0, {self.r_max:.6g})")
            bound = self.sigma / (2.0 * r) if r > 0 else INF
            if not self.j_value > bound:
                out.append(f"index condition: j={self.j_value} must exceed sigma/(2r)={bound:.6g}")
            if self.q == 0 and not self.ell > bound:
                out.append(f"index condition: q=0 requires ell={self.ell} > sigma/(2r)={bound:.6g}")
            if not self.r1_value > 1.0:
                out.append("r1 must exceed 1")
            if not self.r2_value > self.r2_min:
                out.append(f"r2={self.r2_value} must exceed (4p-3)/(3p-3)={self.r2_min:.6g}")
        return out


def young_constant(theta: float, eta: float) -> float:
    """Least C with A^(1-theta) B^theta <= eta A + C B for all A, B >= 0."""
    return theta * ((1.0 - theta) / eta) ** ((1.0 - theta) / theta)


@dataclass
class FunctionalReport:
    values: dict
    components: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def to_dict(self) -> dict:
        return {"values": self.values, "components": self.components}


def _sum(parts: dict) -> float:
    return float(math.fsum(parts.values()))


def functional_suite(traj: Trajectory, schedule: InterpolationSchedule, grams: dict,
                     weight: WeightSpec | None = None) -> FunctionalReport:
    """Energy and dissipation functionals of a trajectory.

    With a trivial weight the soft-potential functionals reduce to their
    unweighted counterparts; the hard-potential left-hand sides are
    reported alongside.
    """
    vn = VelocityNorms(traj, grams)
    p, sg = schedule.p, schedule.sigma
    w = weight

    def n(**kw):
        return mixed_norm(traj, NormTag(**kw), vn=vn)

    comps = {}
    for name, pk, tw in (("E1", 1.0, None), ("Ep", p, None), ("scriptE", 1.0, sg)):
        comps[name] = {
            "f": n(p=pk, time="sup", sigma=tw),
            "w_micro_low": n(p=pk, region="low", time="sup", part="micro", weight=w, sigma=tw),
            "w_f_high": n(p=pk, region="high", time="sup", weight=w, sigma=tw),
        }
    for name, pk, tw in (("D1", 1.0, None), ("Dp", p, None), ("scriptD", 1.0, sg)):
        comps[name] = {
            "micro_D": n(p=pk, time="L2", vnorm="D", part="micro", sigma=tw),
            "w_micro_low_D": n(p=pk, region="low", time="L2", vnorm="D", part="micro",
                               weight=w, sigma=tw),
            "w_f_high_D": n(p=pk, region="high", time="L2", vnorm="D", weight=w, sigma=tw),
            "macro_mult": n(p=pk, time="L2", vnorm="macro", multiplier=True, sigma=tw),
        }
    comps["thm_hc_c1_lhs"] = {
        "f": n(p=1.0, time="sup", sigma=sg),
        "micro_D": n(p=1.0, time="L2", vnorm="D", part="micro", sigma=sg),
        "macro_mult": n(p=1.0, time="L2", vnorm="macro", multiplier=True, sigma=sg),
    }
    comps["thm_hc_c2_lhs"] = {
        "f": n(p=p, time="sup"),
        "micro_D": n(p=p, time="L2", vnorm="D", part="micro"),
        "macro_mult": n(p=p, time="L2", vnorm="macro", multiplier=True),
    }
    comps["apriori_L1_lhs"] = {"f": n(p=1.0, time="sup"),
                             "micro_D": n(p=1.0, time="L2", vnorm="D", part="micro")}
    comps["apriori_Lp_lhs"] = {"f": n(p=p, time="sup"),
                             "micro_D": n(p=p, time="L2", vnorm="D", part="micro")}
    comps["N"] = {"f": comps["apriori_L1_lhs"]["f"], "macro_weighted": macro_sup_term(traj, sg)}
    values = {k: _sum(v) for k, v in comps.items()}
    return FunctionalReport(values, comps)


def macro_sup_term(traj: Trajectory, sigma: float) -> float:
    """Integral over k of sup_t (1+t)^{sigma/2} |(a, b, c)(t, k)|."""
    vals = np.linalg.norm(traj.macro, axis=-1) * ((1.0 + traj.times) ** (sigma / 2.0))[:, None]
    return float(vals.max(axis=0) @ traj.kgrid.weights)


def n_functional(traj: Trajectory, schedule: InterpolationSchedule) -> float:
    """N(T): L^1_k L^inf_T L^2_v norm plus the time-weighted macro sup term."""
    first = mixed_norm(traj, NormTag(p=1.0, time="sup"))
    return first + macro_sup_term(traj, schedule.sigma)


class QuadratureError(ValueError):
    """Radial quadrature is too coarse for the requested profile."""


def l1k_decay_integral(envelope: DecayEnvelope, chi: np.ndarray, kweights: np.ndarray,
                       max_error: float = 0.05) -> np.ndarray:
    """Time series of the L^1_k L^2_v norm of chi(|k|) exp(-tA_k) g0.

    The quadrature error is estimated by comparing the radial rule with a
    trapezoid rule through the same nodes (anchored at k = 0) at t = 0.
    """
    chi = np.asarray(chi, dtype=float)
    series = (kweights * chi) @ envelope.norms
    r = envelope.radii
    integrand = 4.0 * np.pi * r ** 2 * chi * envelope.norms[:, 0]
    order = np.argsort(r)
    trap = trapezoid(np.concatenate([[0.0], integrand[order]]), np.concatenate([[0.0], r[order]]))
    err = abs(trap - series[0]) / max(abs(series[0]), 1e-300)
    if err > max_error:
        raise QuadratureError(f"radial quadrature error estimate {err:.3g} exceeds {max_error}")
    return series


def fit_decay_rate(times, values, window: tuple[float, float] | None = None) -> tuple[float, float]:
    """Least-squares slope of log(value) against log(1+t) and its standard error."""
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    if window is None:
        window = (t.max() / 4.0, t.max())
    sel = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
    if sel.sum() < 5:
        raise ValueError(f"only {int(sel.sum())} samples in the fit window; need at least 5")
    if np.any(y[sel] <= 0):
        raise ValueError("values must be positive on the fit window")
    x = np.log1p(t[sel])
    z = np.log(y[sel])
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, z, rcond=None)
    resid = z - A @ coef
    dof = max(len(x) - 2, 1)
    s2 = float(resid @ resid) / dof
    se = math.sqrt(s2 / float(((x - x.mean()) ** 2).sum()))
    return float(coef[0]), se
