"""Velocity-space discretization: grid, sphere rules, Maxwellian, weights,
the macroscopic projection and the higher moment functionals."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

MU_NORM = (2.0 * np.pi) ** -1.5
SQRT_MU_NORM = (2.0 * np.pi) ** -0.75
N_MACRO = 5


@dataclass(frozen=True)
class VelocityGrid:
    """Uniform midpoint grid on [-V, V]^3 with N_v points per axis."""

    V: float = 6.0
    N: int = 12

    def __post_init__(self):
        if self.V <= 0:
            raise ValueError(f"extent V must be positive, got {self.V}")
        if self.N < 2:
            raise ValueError(f"points_per_axis must be >= 2, got {self.N}")

    @property
    def h(self) -> float:
        return 2.0 * self.V / self.N

    @property
    def weight(self) -> float:
        return self.h ** 3

    @property
    def size(self) -> int:
        return self.N ** 3

    @cached_property
    def axis(self) -> np.ndarray:
        return -self.V + (np.arange(self.N) + 0.5) * self.h

    @cached_property
    def nodes(self) -> np.ndarray:
        x = self.axis
        g = np.stack(np.meshgrid(x, x, x, indexing="ij"), axis=-1)
        return np.ascontiguousarray(g.reshape(-1, 3))

    @cached_property
    def weights(self) -> np.ndarray:
        return np.full(self.size, self.weight)

    @cached_property
    def speed2(self) -> np.ndarray:
        return np.einsum("ij,ij->i", self.nodes, self.nodes)

    @cached_property
    def mirror(self) -> np.ndarray:
        """Index permutation implementing v -> -v."""
        idx = np.arange(self.size).reshape(self.N, self.N, self.N)
        return idx[::-1, ::-1, ::-1].reshape(-1)

    @cached_property
    def hash(self) -> str:
        return hashlib.sha256(f"grid:{self.V!r}:{self.N}".encode()).hexdigest()[:16]

    def inner(self, f: np.ndarray, g: np.ndarray) -> complex:
        """Discrete L^2_v inner product (f, g) = sum conj(f) g h^3."""
        return np.vdot(f, g) * self.weight

    def norm(self, f: np.ndarray) -> float:
        return float(np.sqrt(max(np.vdot(f, f).real, 0.0) * self.weight))


@dataclass(frozen=True)
class SphereQuadrature:
    """Product rule on S^2: Gauss-Legendre in cos(theta) times uniform azimuth."""

    n: int = 6

    @cached_property
    def _rule(self):
        x, wx = np.polynomial.legendre.leggauss(self.n)
        nphi = 2 * self.n
        phi = 2.0 * np.pi * np.arange(nphi) / nphi
        ct, ph = np.meshgrid(x, phi, indexing="ij")
        st = np.sqrt(1.0 - ct ** 2)
        dirs = np.stack([st * np.cos(ph), st * np.sin(ph), ct], axis=-1).reshape(-1, 3)
        w = np.repeat(wx, nphi) * (2.0 * np.pi / nphi)
        return dirs, w

    @property
    def directions(self) -> np.ndarray:
        return self._rule[0]

    @property
    def weights(self) -> np.ndarray:
        return self._rule[1]

    @property
    def size(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class AngularBand:
    """Quadrature on the band theta in [theta_min, pi/2] measured from an axis.

    Used in the frame of the relative velocity: Gauss-Legendre in theta
    (the sin(theta) b(cos theta) density is smooth there) and a uniform
    azimuth grid that is symmetric under phi -> -phi.
    """

    theta_min: float
    n_theta: int = 6
    n_phi: int = 12
    theta_max: float = np.pi / 2

    @cached_property
    def theta(self) -> tuple[np.ndarray, np.ndarray]:
        x, w = np.polynomial.legendre.leggauss(self.n_theta)
        a, b = self.theta_min, self.theta_max
        return 0.5 * (b - a) * x + 0.5 * (b + a), 0.5 * (b - a) * w

    @cached_property
    def phi(self) -> tuple[np.ndarray, np.ndarray]:
        # mirror the table so that cos/sin are exactly (even, odd) under j -> n-j
        j = np.arange(self.n_phi)
        ang = 2.0 * np.pi * np.minimum(j, self.n_phi - j) / self.n_phi
        c = np.cos(ang)
        s = np.sin(ang) * np.where(j <= self.n_phi // 2, 1.0, -1.0)
        if self.n_phi % 2 == 0:
            s[self.n_phi // 2] = 0.0
        return c, s

    @property
    def size(self) -> int:
        return self.n_theta * self.n_phi

    def directions(self, axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Unit vectors of the band around ``axis`` and their solid-angle weights."""
        k = np.asarray(axis, dtype=float)
        k = k / np.linalg.norm(k)
        e1, e2 = frame(k)
        th, wth = self.theta
        c, s = self.phi
        ct, st = np.cos(th), np.sin(th)
        sig = (ct[:, None, None] * k
               + st[:, None, None] * (c[None, :, None] * e1 + s[None, :, None] * e2))
        w = (wth * st)[:, None] * np.full(self.n_phi, 2.0 * np.pi / self.n_phi)
        return sig.reshape(-1, 3), w.reshape(-1)


def frame(k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal pair completing unit k; e1 is odd in k, so that the band
    around -k is the point reflection of the band around k."""
    a = np.array([0.0, 0.0, 1.0]) if abs(k[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(k, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(k, e1)
    return e1, e2


@dataclass(frozen=True)
class WeightSpec:
    """w(v) = <v>^{ell |gamma+2s|} exp(q <v> / 4)."""

    ell: float = 0.0
    q: float = 0.0
    gamma2s: float = 0.0

    def __post_init__(self):
        if self.ell < 0 or self.q < 0:
            raise ValueError(f"weight exponents must be nonnegative, got ell={self.ell}, q={self.q}")

    @property
    def trivial(self) -> bool:
        return self.ell == 0 and self.q == 0

    def tag(self) -> str:
        return f"w(l={self.ell:g},q={self.q:g},g2s={self.gamma2s:g})"


def bracket(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return np.sqrt(1.0 + np.sum(v * v, axis=-1))


def weight_eval(w: WeightSpec, v) -> np.ndarray | float:
    jv = bracket(v)
    out = jv ** (w.ell * abs(w.gamma2s)) * np.exp(w.q * jv / 4.0)
    return float(out) if np.ndim(out) == 0 else out


def weight_field(w: WeightSpec, grid: VelocityGrid) -> np.ndarray:
    return weight_eval(w, grid.nodes)


def maxwellian(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return MU_NORM * np.exp(-0.5 * np.sum(v * v, axis=-1))


def sqrt_maxwellian(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return SQRT_MU_NORM * np.exp(-0.25 * np.sum(v * v, axis=-1))


def maxwellian_field(grid: VelocityGrid) -> np.ndarray:
    return MU_NORM * np.exp(-0.5 * grid.speed2)


def macro_basis(v) -> np.ndarray:
    """The five fields sqrt(mu) * (1, v1, v2, v3, |v|^2 - 3), shape (5, m)."""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    r2 = np.sum(v * v, axis=-1)
    sm = SQRT_MU_NORM * np.exp(-0.25 * r2)
    return np.stack([sm, sm * v[:, 0], sm * v[:, 1], sm * v[:, 2], sm * (r2 - 3.0)])


@dataclass
class MacroCoeffs:
    a: complex
    b: np.ndarray
    c: complex

    @classmethod
    def from_vector(cls, x) -> "MacroCoeffs":
        x = np.asarray(x)
        return cls(a=x[0], b=np.array(x[1:4]), c=x[4])

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.a], self.b, [self.c]])


@dataclass
class MomentSet:
    theta: np.ndarray
    lam: np.ndarray


class MacroProjector:
    """Orthogonal projection onto span{sqrt(mu), v_j sqrt(mu), (|v|^2-3) sqrt(mu)}.

    Built from the discrete Gram matrix so that P is idempotent to machine
    precision whatever the quadrature error of the grid.
    """

    def __init__(self, grid: VelocityGrid, max_condition: float = 1e8):
        self.grid = grid
        self.basis = macro_basis(grid.nodes)
        self.gram = self.basis @ self.basis.T * grid.weight
        self.condition = float(np.linalg.cond(self.gram))
        if not np.isfinite(self.condition) or self.condition > max_condition:
            raise np.linalg.LinAlgError(
                f"macro Gram matrix is degenerate (condition {self.condition:.3e}); grid too coarse")
        # coefficient map f -> (a, b, c), shape (5, N^3)
        self.coef_map = np.linalg.solve(self.gram, self.basis * grid.weight)

    def coefficients(self, f: np.ndarray) -> np.ndarray:
        """Macro coefficients for f of shape (..., N^3)."""
        return np.tensordot(f, self.coef_map, axes=([-1], [1]))

    def apply(self, f: np.ndarray) -> np.ndarray:
        return np.tensordot(self.coefficients(f), self.basis, axes=([-1], [0]))

    def micro(self, f: np.ndarray) -> np.ndarray:
        return f - self.apply(f)

    def orthonormal_complement(self) -> np.ndarray:
        """Columns spanning range(I-P), orthonormal in the plain Euclidean sense."""
        q, _ = np.linalg.qr(self.basis.T)
        full, _, _ = np.linalg.svd(q, full_matrices=True)
        return full[:, N_MACRO:]


def project_P(f: np.ndarray, grid: VelocityGrid, projector: MacroProjector | None = None):
    proj = projector or MacroProjector(grid)
    coeffs = proj.coefficients(f)
    pf = np.tensordot(coeffs, proj.basis, axes=([-1], [0]))
    if np.ndim(coeffs) == 1:
        coeffs = MacroCoeffs.from_vector(coeffs)
    return coeffs, pf, f - pf


@dataclass
class MomentFunctionals:
    """Rows implementing Theta_jm and Lambda_j as discrete inner products."""

    grid: VelocityGrid
    theta_rows: np.ndarray = field(init=False)
    lam_rows: np.ndarray = field(init=False)

    def __post_init__(self):
        v = self.grid.nodes
        sm = sqrt_maxwellian(v)
        eye = np.eye(3)
        self.theta_rows = (v[:, :, None] * v[:, None, :] - eye) * sm[:, None, None]
        self.theta_rows = np.moveaxis(self.theta_rows, 0, -1) * self.grid.weight
        r2 = self.grid.speed2
        self.lam_rows = ((r2 - 5.0)[:, None] * v * sm[:, None]).T * (self.grid.weight / 10.0)

    def theta(self, f: np.ndarray) -> np.ndarray:
        return np.tensordot(f, self.theta_rows, axes=([-1], [-1]))

    def lam(self, f: np.ndarray) -> np.ndarray:
        return np.tensordot(f, self.lam_rows, axes=([-1], [-1]))


def theta_lambda_moments(f: np.ndarray, grid: VelocityGrid) -> MomentSet:
    m = MomentFunctionals(grid)
    return MomentSet(theta=m.theta(f), lam=m.lam(f))


def interp_stencil(points: np.ndarray, grid: VelocityGrid, basis_nodes: np.ndarray):
    """Trilinear stencil of off-grid points plus the macro correction terms.

    Returns (idx, wt, eps): corner indices and weights of shape (m, 8), with
    zero weight for corners outside the grid (ghost nodes read as 0) and for
    points outside [-V, V]^3; eps (m, 5) holds phi_k(p) - I[phi_k](p) for the
    five macro basis fields, which makes the interpolation exact on them.
    """
    p = np.atleast_2d(points)
    m = p.shape[0]
    xi = (p + grid.V) / grid.h - 0.5
    i0 = np.floor(xi).astype(np.int64)
    t = xi - i0
    inside = np.all(np.abs(p) <= grid.V, axis=1)
    n = grid.N
    idx = np.zeros((m, 8), dtype=np.int64)
    wt = np.zeros((m, 8))
    c = 0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                ix, iy, iz = i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz
                ok = inside & (ix >= 0) & (ix < n) & (iy >= 0) & (iy < n) & (iz >= 0) & (iz < n)
                w = ((t[:, 0] if dx else 1 - t[:, 0]) * (t[:, 1] if dy else 1 - t[:, 1])
                     * (t[:, 2] if dz else 1 - t[:, 2]))
                idx[:, c] = np.where(ok, (ix * n + iy) * n + iz, 0)
                wt[:, c] = np.where(ok, w, 0.0)
                c += 1
    interp_basis = np.einsum("mc,kmc->mk", wt, basis_nodes[:, idx])
    eps = macro_basis(p).T - interp_basis
    return idx, wt, eps


def interpolate(f: np.ndarray, points: np.ndarray, grid: VelocityGrid,
                projector: MacroProjector) -> np.ndarray:
    """Evaluate a perturbation field off the grid: the macro part Pf exactly,
    the remainder (I-P)f trilinearly with zero extension."""
    idx, wt, eps = interp_stencil(points, grid, projector.basis)
    return np.einsum("mc,mc->m", wt, f[idx]) + eps @ projector.coefficients(f)


def extend(f: np.ndarray, projector: MacroProjector) -> np.ndarray:
    """Extended coefficient vector [f, (a, b, c)] consumed by the kernels."""
    return np.concatenate([f, projector.coefficients(f)], axis=-1)


FIELD_MAGIC = b"SBFD"


def write_field(path, f: np.ndarray, grid: VelocityGrid) -> None:
    data = np.asarray(f, dtype="<c16").reshape(grid.N, grid.N, grid.N)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sdI", FIELD_MAGIC, grid.V, grid.N))
        fh.write(data.tobytes(order="C"))


def read_field(path) -> tuple[np.ndarray, VelocityGrid]:
    with open(path, "rb") as fh:
        magic, V, N = struct.unpack("<4sdI", fh.read(16))
        if magic != FIELD_MAGIC:
            raise ValueError(f"{path}: not a field file")
        data = np.frombuffer(fh.read(), dtype="<c16")
    if data.size != N ** 3:
        raise ValueError(f"{path}: expected {N ** 3} values, found {data.size}")
    return data.astype(complex), VelocityGrid(V=V, N=N)
