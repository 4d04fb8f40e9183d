"""Experiment stages and the run manifest.

Stages run in the order assemble -> simulate -> measure -> verify -> fit.
Each stage reads its inputs from the run directory and writes its outputs
there; a stage whose input file is missing fails with a message naming the
stage that produces it.  CSV and JSON payloads are written with fixed
formatting so that identical configs give identical checksums.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import resource
import time
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from .collision import GammaTensor, assemble_all, coercivity_spectrum
from .config import ExperimentConfig
from .norms import functional_suite, fit_decay_rate, l1k_decay_integral, n_functional
from .transport import (DecayEnvelope, GammaHat, KGrid, SpectralState, Stepper,
                        enforce_conjugate, radial_decay_envelope, read_trajectory,
                        reconstruct_positivity, simulate, write_trajectory)
from .velocity import MacroProjector, SphereQuadrature, sqrt_maxwellian
from .verify import (SampleGrid, StrideError, check_interpolation, energy_ledger, ledger_table,
                     macro_residual, random_field, run_checks)

log = logging.getLogger(__name__)

STAGES = ("assemble", "simulate", "measure", "verify", "fit")
DECAY_TOLERANCE = 0.15
PROFILE_MARGIN = 0.01


class StageError(RuntimeError):
    """A stage could not run because an input artifact is missing."""


class AcceptanceError(RuntimeError):
    """A verification stage found violations."""


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not serializable: {type(x)}")


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


def write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(_clean(payload), indent=2, sort_keys=True, default=_json_default) + "\n")


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    path.write_text(buf.getvalue())


@dataclass
class StageRecord:
    status: str = "pending"
    wall_s: float = 0.0
    peak_mem_mb: float = 0.0
    notes: list = field(default_factory=list)
    error: str | None = None


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    stages: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def inventory(self, root: Path) -> None:
        self.files = {p.name: sha256_file(p) for p in sorted(root.iterdir())
                      if p.is_file() and p.name != "manifest.json"}

    def write(self, root: Path) -> None:
        self.inventory(root)
        write_json(root / "manifest.json", self.to_dict())


def _peak_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


class Pipeline:
    """Runs stages of one experiment inside its run directory."""

    def __init__(self, cfg: ExperimentConfig, out_dir: Path | None = None, threads: int = 1):
        self.cfg = cfg
        base = Path(out_dir) if out_dir is not None else Path(cfg.outputs["directory"])
        self.root = base / cfg.hash
        self.threads = threads
        self.manifest = RunManifest(cfg.hash, code_version())

    # ---- shared inputs -------------------------------------------------
    @property
    def sphere(self) -> SphereQuadrature:
        return SphereQuadrature(self.cfg.sphere_order)

    def operators(self):
        return assemble_all(self.cfg.kernel, self.cfg.grid, self.sphere)

    def kgrid(self) -> KGrid:
        kg = self.cfg.kgrid
        if kg["mode"] == "lattice":
            return KGrid.lattice(int(kg["n_side"]), float(kg["dk"]))
        if kg["radii"] is not None:
            return KGrid.radial(kg["radii"])
        return KGrid.radial_gauss(float(kg["K_max"]), int(kg["n_radial"]))

    def velocity_profile(self) -> np.ndarray:
        grid = self.cfg.grid
        init = self.cfg.run["initial"]
        v = grid.nodes
        if init["family"] == "maxwellian":
            return sqrt_maxwellian(v)
        if init["family"] == "bump":
            return sqrt_maxwellian(v) * (1.0 + 0.5 * v[:, 0] + (grid.speed2 - 3.0) / 6.0)
        return random_field(grid, np.random.default_rng(init["seed"]))

    def initial_state(self, kgrid: KGrid) -> np.ndarray:
        """Initial modes: amplitude x k-profile x velocity profile.

        On a lattice the k-profile is a Gaussian of width dk with the k = 0
        mode removed, normalised so that the physical field at x = 0 equals
        amplitude x velocity profile.
        """
        amp = float(self.cfg.run["initial"]["amplitude"])
        phi = self.velocity_profile()
        if kgrid.mode != "lattice":
            return amp * np.tile(phi, (kgrid.size, 1)).astype(complex)
        chi = np.exp(-kgrid.radii ** 2 / (2.0 * kgrid.spacing ** 2))
        chi[kgrid.zero_index] = 0.0
        chi /= chi.sum() * kgrid.spacing ** 3
        f0 = amp * chi[:, None] * phi[None, :]
        return enforce_conjugate(f0.astype(complex), kgrid)

    def path(self, name: str, producer: str) -> Path:
        p = self.root / name
        if not p.exists():
            raise StageError(f"missing {name} in {self.root}: run stage '{producer}' first")
        return p

    # ---- stages --------------------------------------------------------
    def stage_assemble(self, rec: StageRecord):
        ops = self.operators()
        cached = all(m.meta.get("cache_hit", False) for m in ops.values())
        rec.notes.append("operator cache hit" if cached else "assembled")
        if cached and (self.root / "coercivity.json").exists():
            rec.notes.append("no-op")
            return
        rep = coercivity_spectrum(ops["L"], ops["D_GRAM"], MacroProjector(self.cfg.grid),
                                  L1=ops["L1"], L2=ops["L2"], theta_min=self.cfg.kernel.theta_min)
        write_json(self.root / "coercivity.json", rep.to_dict())

    def stage_simulate(self, rec: StageRecord):
        cfg, run = self.cfg, self.cfg.run
        L = self.operators()["L"].matrix
        kg = self.kgrid()
        if run["kind"] == "envelope":
            env = radial_decay_envelope(L, cfg.grid, kg.radii, self.velocity_profile(),
                                        dt=float(run["dt"]), T=float(run["T_end"]))
            write_csv(self.root / "envelope.csv", ["t"] + [f"r={r!r}" for r in kg.radii],
                      np.column_stack([env.times, env.norms.T]))
            write_csv(self.root / "kgrid.csv", ["radius", "weight"],
                      np.column_stack([kg.radii, kg.weights]))
            return
        nonlinear = None
        if run["kind"] == "nonlinear":
            nonlinear = GammaHat(GammaTensor(cfg.kernel, cfg.grid, self.sphere), kg)
        stepper = Stepper(L, cfg.grid, kg, float(run["dt"]), run["integrator"], nonlinear)
        lows = []

        def watch(state):
            if kg.mode == "lattice":
                lows.append((state.t, reconstruct_positivity(
                    state.fhat, kg, cfg.grid, int(cfg.checks["positivity_samples"])).min_F))

        state = SpectralState(self.initial_state(kg))
        traj = simulate(state, stepper, float(run["T_end"]), int(run["stride"]), callback=watch)
        write_trajectory(self.root / "trajectory.sbtr", traj)
        if lows:
            t_min, F_min = min(lows, key=lambda x: x[1])
            write_json(self.root / "positivity.json",
                       {"min_F": F_min, "t_at_min": t_min, "snapshots": len(lows),
                        "samples_per_snapshot": int(cfg.checks["positivity_samples"])})

    def _envelope(self) -> tuple[DecayEnvelope, np.ndarray]:
        data = np.loadtxt(self.path("envelope.csv", "simulate"), delimiter=",", skiprows=1, ndmin=2)
        kdat = np.loadtxt(self.path("kgrid.csv", "simulate"), delimiter=",", skiprows=1, ndmin=2)
        return DecayEnvelope(kdat[:, 0], data[:, 0], data[:, 1:].T), kdat[:, 1]

    def profile_exponent(self, p: float) -> float:
        """|k|^-a realizes L^p_k membership near k = 0 only just: a = 3/p - margin."""
        return max(3.0 / p - PROFILE_MARGIN, 0.0) if p != math.inf else 0.0

    def stage_measure(self, rec: StageRecord):
        cfg = self.cfg
        if cfg.run["kind"] == "envelope":
            env, weights = self._envelope()
            profiles = cfg.run["initial"]["profiles"]
            cols = []
            for p in profiles:
                chi = env.radii ** -self.profile_exponent(p)
                cols.append(l1k_decay_integral(env, chi, weights))
            write_csv(self.root / "decay.csv", ["t"] + [f"p={p}" for p in profiles],
                      np.column_stack([env.times] + cols))
            return
        traj = read_trajectory(self.path("trajectory.sbtr", "simulate"))
        grams = {"D_GRAM": self.operators()["D_GRAM"]}
        fs = functional_suite(traj, cfg.schedule, grams, cfg.weight)
        write_json(self.root / "functionals.json",
                   {**fs.to_dict(), "N": n_functional(traj, cfg.schedule)})
        entries = energy_ledger(traj, cfg.schedule, grams, cfg.weight,
                                nonlinear=cfg.run["kind"] == "nonlinear",
                                provenance={"theta_min": cfg.kernel.theta_min, "config": cfg.hash})
        write_json(self.root / "ledger.json", [e.to_dict() for e in entries])
        for fmt in ("csv", "markdown"):
            if fmt in cfg.outputs["formats"]:
                ext = "csv" if fmt == "csv" else "md"
                (self.root / f"ledger.{ext}").write_text(ledger_table(entries, fmt))

    def stage_verify(self, rec: StageRecord):
        cfg = self.cfg
        n = int(cfg.checks["interpolation_samples"])
        jobs = {"interpolation": lambda: check_interpolation(
            cfg.schedule, samples=SampleGrid(n, n, n),
            gamma2s=cfg.kernel.gamma2s if cfg.schedule.soft else -1.0)}
        traj = None
        if cfg.run["kind"] != "envelope":
            traj = read_trajectory(self.path("trajectory.sbtr", "simulate"))
        if cfg.run["kind"] == "linear":
            L = self.operators()["L"].matrix

            def residual():
                try:
                    return macro_residual(traj, L)
                except StrideError as exc:
                    return exc
            jobs["macro_residual"] = residual
        results = run_checks(jobs, self.threads)
        reps = results["interpolation"]
        payload = {"interpolation": {k: v.to_dict() for k, v in reps.items()}}
        failures = [k for k, v in reps.items() if v.violations]
        if "macro_residual" in results:
            mr = results["macro_residual"]
            if isinstance(mr, StrideError):
                payload["macro_residual"] = {"skipped": str(mr)}
                rec.notes.append("macro residual skipped: " + str(mr))
            else:
                payload["macro_residual"] = mr.to_dict()
                failures += [e for e, r in mr.relative().items() if r > 1e-3]
        pos = self.root / "positivity.json"
        if traj is not None and pos.exists():
            payload["positivity"] = json.loads(pos.read_text())
            if payload["positivity"]["min_F"] < -1e-6:
                failures.append("positivity")
        payload["failures"] = sorted(failures)
        write_json(self.root / "verify.json", payload)
        if failures:
            raise AcceptanceError(f"verification failures: {', '.join(sorted(failures))}")

    def stage_fit(self, rec: StageRecord):
        cfg = self.cfg
        if cfg.run["kind"] != "envelope":
            rec.notes.append("no decay envelope for this run kind")
            return
        data = np.loadtxt(self.path("decay.csv", "measure"), delimiter=",", skiprows=1, ndmin=2)
        out, bad = [], []
        for j, p in enumerate(cfg.run["initial"]["profiles"]):
            expected = -1.5 * (1.0 - (0.0 if p == math.inf else 1.0 / p))
            for a, b in cfg.run["windows"]:
                slope, se = fit_decay_rate(data[:, 0], data[:, j + 1], (a, b))
                ok = abs(slope - expected) <= DECAY_TOLERANCE
                out.append({"p": p, "window": [a, b], "slope": slope, "stderr": se,
                            "expected": expected, "tolerance": DECAY_TOLERANCE, "pass": ok})
                if not ok:
                    bad.append(f"p={p} window={a}-{b}")
        write_json(self.root / "fit.json", {"fits": out})
        if bad:
            raise AcceptanceError(f"decay exponent outside tolerance: {', '.join(bad)}")

    # ---- orchestration -------------------------------------------------
    def run(self, stages=STAGES) -> RunManifest:
        unknown = [s for s in stages if s not in STAGES]
        if unknown:
            raise ValueError(f"unknown stages {unknown}; choose from {list(STAGES)}")
        self.root.mkdir(parents=True, exist_ok=True)
        order = [s for s in STAGES if s in stages]
        failed, error = None, None
        for name in order:
            rec = StageRecord()
            self.manifest.stages[name] = rec
            if failed is not None:
                rec.status = "skipped"
                rec.notes.append(f"upstream stage '{failed}' failed")
                continue
            t0 = time.perf_counter()
            try:
                getattr(self, f"stage_{name}")(rec)
                rec.status = "ok"
            except Exception as exc:  # recorded in the manifest, re-raised below
                rec.status = "failed"
                rec.error = f"{type(exc).__name__}: {exc}"
                failed, error = name, exc
            rec.wall_s = time.perf_counter() - t0
            rec.peak_mem_mb = _peak_mb()
            log.info("stage %s: %s (%.1f s)", name, rec.status, rec.wall_s)
        self.manifest.stages = {k: asdict(v) for k, v in self.manifest.stages.items()}
        self.manifest.write(self.root)
        if error is not None:
            raise error
        return self.manifest
