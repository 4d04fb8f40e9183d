"""Per-wavevector evolution of the perturbation and its nonlinear coupling.

Each Fourier mode obeys d/dt f(k) + i (v.k) f(k) + L f(k) = Gamma_hat(f, f)(k).
Without the nonlinear term the modes decouple; with it they couple
through the k-convolution, evaluated here pseudo-spectrally on a small
periodic x-grid large enough that no product wraps back onto the lattice.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
from scipy.stats import qmc

from .velocity import MacroCoeffs, MacroProjector, VelocityGrid, maxwellian, sqrt_maxwellian

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Non-finite values appeared during time stepping."""


@dataclass(frozen=True)
class KGrid:
    """Wavevector nodes with integration weights.

    lattice: a cube of (2m+1)^3 points spaced dk, weight dk^3 each.
    radial: points |k| e3 with 3-D radial weights 4 pi |k|^2 d|k|.
    """

    mode: str
    points: np.ndarray
    weights: np.ndarray
    spacing: float | None = None
    half_width: int | None = None

    @classmethod
    def lattice(cls, n_side: int, dk: float) -> "KGrid":
        if n_side % 2 == 0 or n_side < 1:
            raise ValueError("lattice side must be odd so that k=0 is a node")
        m = n_side // 2
        j = np.arange(-m, m + 1)
        pts = np.stack(np.meshgrid(j, j, j, indexing="ij"), axis=-1).reshape(-1, 3) * dk
        return cls("lattice", pts, np.full(len(pts), dk ** 3), dk, m)

    @classmethod
    def radial(cls, radii, weights=None) -> "KGrid":
        r = np.asarray(radii, dtype=float)
        if weights is None:
            weights = np.zeros_like(r)
        pts = np.zeros((len(r), 3))
        pts[:, 2] = r
        return cls("radial", pts, np.asarray(weights, dtype=float))

    @classmethod
    def radial_gauss(cls, K: float, n: int) -> "KGrid":
        """Radii K s^2 with s on Gauss-Legendre nodes in (0, 1), clustered near 0."""
        x, w = np.polynomial.legendre.leggauss(n)
        s = 0.5 * (x + 1.0)
        ws = 0.5 * w
        r = K * s ** 2
        return cls.radial(r, 4.0 * np.pi * r ** 2 * (2.0 * K * s) * ws)

    @property
    def size(self) -> int:
        return len(self.points)

    @cached_property
    def radii(self) -> np.ndarray:
        return np.linalg.norm(self.points, axis=1)

    @cached_property
    def neg_index(self) -> np.ndarray:
        if self.mode != "lattice":
            raise ValueError("k -> -k is only defined on the lattice")
        return np.arange(self.size)[::-1]

    @cached_property
    def representatives(self) -> np.ndarray:
        """One mode out of each {k, -k} pair (k = 0 included)."""
        return np.arange(self.size // 2 + 1)

    @cached_property
    def zero_index(self) -> int:
        return int(np.argmin(self.radii))

    def index_of(self, j) -> int:
        """Flat index of the lattice point with integer coordinates j."""
        m = self.half_width
        n = 2 * m + 1
        a, b, c = (int(x) + m for x in j)
        if min(a, b, c) < 0 or max(a, b, c) >= n:
            return -1
        return (a * n + b) * n + c

    def low_mask(self) -> np.ndarray:
        """|k| <= 1 (ties go to the low-frequency region)."""
        return self.radii <= 1.0 + 1e-12


@dataclass
class SpectralState:
    fhat: np.ndarray
    t: float = 0.0

    def copy(self) -> "SpectralState":
        return SpectralState(self.fhat.copy(), self.t)


def conjugate_defect(fhat: np.ndarray, kgrid: KGrid) -> float:
    neg = kgrid.neg_index
    scale = max(np.abs(fhat).max(), 1e-300)
    return float(np.abs(fhat - np.conj(fhat[neg])).max() / scale)


def enforce_conjugate(fhat: np.ndarray, kgrid: KGrid) -> np.ndarray:
    return 0.5 * (fhat + np.conj(fhat[kgrid.neg_index]))


def transport_apply(k, f: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    """i (v.k) f."""
    return 1j * (grid.nodes @ np.asarray(k, dtype=float)) * f


def multiplier(k) -> np.ndarray | float:
    """|k| / sqrt(1 + |k|^2)."""
    r = np.linalg.norm(np.asarray(k, dtype=float), axis=-1)
    return r / np.sqrt(1.0 + r * r)


def multiplier_apply(k, x):
    m = multiplier(k)
    if isinstance(x, MacroCoeffs):
        return MacroCoeffs(m * x.a, m * np.asarray(x.b), m * x.c)
    return m * x


def mode_matrix(k, L: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    """Generator i diag(v.k) + L of one mode."""
    A = L.astype(complex)
    A[np.diag_indices_from(A)] += 1j * (grid.nodes @ np.asarray(k, dtype=float))
    return A


def spectral_radius(A: np.ndarray, iters: int = 200, seed: int = 0) -> float:
    """Power-iteration estimate of the spectral radius of a dense matrix."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=A.shape[0]) + 1j * rng.normal(size=A.shape[0])
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        y = A @ x
        lam_new = np.linalg.norm(y)
        x = y / lam_new
        if abs(lam_new - lam) <= 1e-10 * lam_new:
            break
        lam = lam_new
    return float(lam_new)


RK4_STABILITY = 2.78


@dataclass
class Stepper:
    """Time integration of all modes of a SpectralState.

    integrator 'rk4': classical RK4 on -(A f) + N(f).
    integrator 'cn': Crank-Nicolson on the linear part with the nonlinear
    increment extrapolated (Adams-Bashforth 2, Euler on the first step).
    The nonlinear term is any callable fhat -> increment (None for a
    linear run).
    """

    L: np.ndarray
    grid: VelocityGrid
    kgrid: KGrid
    dt: float
    integrator: str = "cn"
    nonlinear: object = None
    use_L: bool = True
    safety: float = 0.9
    _lu: dict = field(default_factory=dict, repr=False)
    _prev_n: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.integrator not in ("rk4", "cn"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        self.Lm = self.L if self.use_L else np.zeros_like(self.L)
        self.vk = self.kgrid.points @ self.grid.nodes.T  # (nk, nv)
        if self.integrator == "rk4":
            kmax = self.kgrid.points[np.argmax(self.kgrid.radii)]
            rho = spectral_radius(mode_matrix(kmax, self.Lm, self.grid))
            self.rho = rho
            if self.dt > self.safety * RK4_STABILITY / rho:
                raise ValueError(f"RK4 step {self.dt} exceeds the stability bound "
                                 f"{self.safety * RK4_STABILITY / rho:.4g} (spectral radius {rho:.4g})")
        self.symmetric = self.kgrid.mode == "lattice"

    def linear_rhs(self, F: np.ndarray) -> np.ndarray:
        return -(1j * self.vk * F + F @ self.Lm.T)

    def _modes(self):
        return self.kgrid.representatives if self.symmetric else np.arange(self.kgrid.size)

    def _factor(self, i: int):
        if i not in self._lu:
            A = mode_matrix(self.kgrid.points[i], self.Lm, self.grid)
            M = np.eye(len(A)) + 0.5 * self.dt * A
            self._lu[i] = sla.lu_factor(M)
        return self._lu[i]

    def _check(self, F: np.ndarray, t: float):
        bad = ~np.all(np.isfinite(F), axis=1)
        if bad.any():
            raise NumericalError(f"non-finite values at t={t:.6g} in mode {int(np.argmax(bad))}")

    def step(self, state: SpectralState) -> SpectralState:
        F = np.asarray(state.fhat, dtype=complex)
        if self.integrator == "rk4":
            def rhs(X):
                out = self.linear_rhs(X)
                if self.nonlinear is not None:
                    out = out + self.nonlinear(X)
                return out
            k1 = rhs(F)
            k2 = rhs(F + 0.5 * self.dt * k1)
            k3 = rhs(F + 0.5 * self.dt * k2)
            k4 = rhs(F + self.dt * k3)
            new = F + (self.dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        else:
            rhs = F + 0.5 * self.dt * self.linear_rhs(F)
            if self.nonlinear is not None:
                n_now = self.nonlinear(F)
                n_use = n_now if self._prev_n is None else 1.5 * n_now - 0.5 * self._prev_n
                self._prev_n = n_now
                rhs = rhs + self.dt * n_use
            new = np.empty_like(F)
            for i in self._modes():
                new[i] = sla.lu_solve(self._factor(i), rhs[i], check_finite=False)
            if self.symmetric:
                reps = self._modes()
                neg = self.kgrid.neg_index
                new[neg[reps]] = np.conj(new[reps])
        self._check(new, state.t + self.dt)
        return SpectralState(new, state.t + self.dt)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray          # (n_snap, nk, nv)
    kgrid: KGrid
    grid: VelocityGrid
    dt: float = 0.0

    def __post_init__(self):
        if len(self.times) and (self.times[0] != 0.0 or np.any(np.diff(self.times) <= 0)):
            raise ValueError("snapshot times must start at 0 and increase strictly")

    @cached_property
    def projector(self) -> MacroProjector:
        return MacroProjector(self.grid)

    @cached_property
    def macro(self) -> np.ndarray:
        """(a, b1, b2, b3, c) per snapshot and mode, shape (n_snap, nk, 5)."""
        return self.projector.coefficients(self.states)

    @cached_property
    def micro(self) -> np.ndarray:
        return self.states - np.tensordot(self.macro, self.projector.basis, axes=([-1], [0]))

    def window(self, T: float) -> "Trajectory":
        keep = self.times <= T + 1e-9
        return Trajectory(self.times[keep], self.states[keep], self.kgrid, self.grid, self.dt)

    def scaled(self, factor: float) -> "Trajectory":
        return Trajectory(self.times, self.states * factor, self.kgrid, self.grid, self.dt)


def simulate(state: SpectralState, stepper: Stepper, T_end: float, stride: int = 1,
             callback=None) -> Trajectory:
    n_steps = int(round(T_end / stepper.dt))
    if abs(n_steps * stepper.dt - T_end) > 1e-9 * max(1.0, T_end):
        raise ValueError("T_end must be a multiple of dt")
    times = [state.t]
    snaps = [state.fhat.copy()]
    cur = state
    for n in range(1, n_steps + 1):
        cur = stepper.step(cur)
        if n % stride == 0 or n == n_steps:
            times.append(cur.t)
            snaps.append(cur.fhat.copy())
            if callback is not None:
                callback(cur)
    return Trajectory(np.array(times), np.array(snaps), stepper.kgrid, stepper.grid, stepper.dt)


class GammaHat:
    """Gamma_hat(f, f)(k) = sum_l Gamma(f(k - l), f(l)) dk^3 on a lattice.

    Pseudo-spectral evaluation: the lattice (2m+1)^3 is embedded into a
    periodic grid of side M >= 3m + 1, so that every product index k1 + k2
    that wraps around lands outside the lattice; Gamma(f(x), f(x)) is then
    computed pointwise from the packed tensor and transformed back.
    """

    def __init__(self, tensor, kgrid: KGrid):
        if kgrid.mode != "lattice":
            raise ValueError("the k-convolution needs a lattice k-grid")
        self.tensor = tensor
        self.kgrid = kgrid
        m = kgrid.half_width
        self.M = 3 * m + 1
        j = np.arange(-m, m + 1) % self.M
        J = np.stack(np.meshgrid(j, j, j, indexing="ij"), axis=-1).reshape(-1, 3)
        self.pos = (J[:, 0], J[:, 1], J[:, 2])

    def __call__(self, fhat: np.ndarray) -> np.ndarray:
        M = self.M
        nv = fhat.shape[1]
        box = np.zeros((M, M, M, nv), dtype=complex)
        box[self.pos] = fhat
        fx = np.fft.ifftn(box, axes=(0, 1, 2)) * M ** 3
        imag = np.abs(fx.imag).max()
        if imag > 1e-8 * max(np.abs(fx).max(), 1e-300):
            raise ValueError("state is not conjugate symmetric; real-space field is complex")
        gx = self.tensor.quadratic(fx.real.reshape(-1, nv).T).T.reshape(M, M, M, nv)
        coeff = np.fft.fftn(gx, axes=(0, 1, 2)) / M ** 3
        return coeff[self.pos] * self.kgrid.spacing ** 3


def gamma_hat_direct(fhat: np.ndarray, kgrid: KGrid, pair, modes=None) -> np.ndarray:
    """Reference k-convolution by explicit summation over l.

    pair(f, g) evaluates Gamma(f, g) for complex velocity fields; terms with
    k - l outside the lattice are dropped.
    """
    m = kgrid.half_width
    n = 2 * m + 1
    J = np.stack(np.unravel_index(np.arange(kgrid.size), (n, n, n)), axis=-1) - m
    active = np.nonzero(np.abs(fhat).max(axis=1) > 0)[0]
    modes = range(kgrid.size) if modes is None else modes
    out = np.zeros((len(list(modes)), fhat.shape[1]), dtype=complex)
    for row, i in enumerate(modes):
        for l in active:
            kl = kgrid.index_of(J[i] - J[l])
            if kl < 0 or kl not in active:
                continue
            out[row] += pair(fhat[kl], fhat[l])
    return out * kgrid.spacing ** 3


@dataclass
class PositivityReport:
    min_F: float
    x: np.ndarray
    v: np.ndarray
    min_mu: float
    samples: int


def physical_field(fhat: np.ndarray, kgrid: KGrid, x: np.ndarray) -> np.ndarray:
    """f(x, v) = Re sum_k fhat(k, v) e^{i k.x} dk^3 at points x of shape (M, 3)."""
    phase = np.exp(1j * (x @ kgrid.points.T)) * kgrid.weights[None, :]
    return (phase @ fhat).real


def positivity_samples(kgrid: KGrid, n: int, seed: int = 0) -> np.ndarray:
    """Quasi-random x points over one period cell of the lattice."""
    L = 2.0 * np.pi / kgrid.spacing
    return (qmc.Halton(d=3, scramble=True, seed=seed).random(n) - 0.5) * L


def reconstruct_positivity(fhat: np.ndarray, kgrid: KGrid, grid: VelocityGrid,
                           n_samples: int = 256, seed: int = 0) -> PositivityReport:
    x = positivity_samples(kgrid, n_samples, seed)
    f = physical_field(fhat, kgrid, x)
    mu = maxwellian(grid.nodes)
    F = mu[None, :] + sqrt_maxwellian(grid.nodes)[None, :] * f
    i, j = np.unravel_index(np.argmin(F), F.shape)
    return PositivityReport(float(F[i, j]), x[i], grid.nodes[j], float(mu.min()), n_samples)


@dataclass
class DecayEnvelope:
    radii: np.ndarray
    times: np.ndarray
    norms: np.ndarray           # (n_radii, n_times)


def propagator(k, L: np.ndarray, grid: VelocityGrid, dt: float) -> np.ndarray:
    return sla.expm(-dt * mode_matrix(k, L, grid))


def radial_decay_envelope(L: np.ndarray, grid: VelocityGrid, radii, g0: np.ndarray,
                          dt: float = 0.5, T: float = 100.0) -> DecayEnvelope:
    """||exp(-t (i v.k + L)) g0|| for k = |k| e3 on the time grid 0, dt, ..., T."""
    radii = np.asarray(radii, dtype=float)
    n_t = int(round(T / dt))
    times = dt * np.arange(n_t + 1)
    norms = np.empty((len(radii), n_t + 1))
    g0 = np.asarray(g0, dtype=complex)
    for i, r in enumerate(radii):
        E = propagator(np.array([0.0, 0.0, r]), L, grid, dt)
        g = g0.copy()
        norms[i, 0] = grid.norm(g)
        for n in range(1, n_t + 1):
            g = E @ g
            norms[i, n] = grid.norm(g)
    return DecayEnvelope(radii, times, norms)


def decay_rate(L: np.ndarray, grid: VelocityGrid, radius: float, g0: np.ndarray, t: float) -> float:
    """Mean exponential rate -log(||exp(-tA) g0|| / ||g0||) / t of one mode."""
    g = sla.expm(-t * mode_matrix(np.array([0.0, 0.0, radius]), L, grid)) @ np.asarray(g0, complex)
    return float(-np.log(grid.norm(g) / grid.norm(g0)) / t)


TRAJ_MAGIC = b"SBTR"


def write_trajectory(path, traj: Trajectory) -> None:
    """Header (magic, V, N, n_k, n_snap) then per snapshot: t and complex field."""
    ns, nk, nv = traj.states.shape
    with open(path, "wb") as fh:
        fh.write(TRAJ_MAGIC + struct.pack("<dIII", traj.grid.V, traj.grid.N, nk, ns))
        fh.write(np.ascontiguousarray(traj.kgrid.points, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(traj.kgrid.weights, dtype="<f8").tobytes())
        for t, s in zip(traj.times, traj.states):
            fh.write(struct.pack("<d", t))
            fh.write(np.ascontiguousarray(s, dtype="<c16").tobytes())


def read_trajectory(path) -> Trajectory:
    with open(path, "rb") as fh:
        if fh.read(4) != TRAJ_MAGIC:
            raise ValueError(f"{path}: not a trajectory file")
        V, N, nk, ns = struct.unpack("<dIII", fh.read(20))
        pts = np.frombuffer(fh.read(24 * nk), dtype="<f8").reshape(nk, 3)
        wts = np.frombuffer(fh.read(8 * nk), dtype="<f8")
        grid = VelocityGrid(V, N)
        times, states = [], []
        for _ in range(ns):
            (t,) = struct.unpack("<d", fh.read(8))
            times.append(t)
            states.append(np.frombuffer(fh.read(16 * nk * grid.size), dtype="<c16").reshape(nk, -1))
    lattice = np.allclose(wts, wts[0]) and np.any(pts[:, 0] != 0)
    if lattice:
        dk = float(np.cbrt(wts[0]))
        kg = KGrid("lattice", pts.copy(), wts.copy(), dk, int(round(np.abs(pts).max() / dk)))
    else:
        kg = KGrid("radial", pts.copy(), wts.copy())
    return Trajectory(np.array(times), np.array(states), kg, grid)
