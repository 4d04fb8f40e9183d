import math

import numpy as np
import pytest
from scipy.integrate import quad

from spectral_boltzmann.norms import (INF, FunctionalReport, InterpolationSchedule, NormTag,
                                      QuadratureError, VelocityNorms, fit_decay_rate,
                                      functional_suite, k_aggregate, l1k_decay_integral,
                                      macro_sup_term, mixed_norm, n_functional, region_mask,
                                      time_aggregate, young_constant)
from spectral_boltzmann.transport import (DecayEnvelope, KGrid, SpectralState, Stepper, Trajectory,
                                          enforce_conjugate, radial_decay_envelope, simulate)
from spectral_boltzmann.velocity import VelocityGrid, WeightSpec, sqrt_maxwellian

SMALL = VelocityGrid(3.0, 4)
LATTICE = KGrid.lattice(3, 0.6)


def random_trajectory(seed, n_snap=4, kgrid=LATTICE, grid=SMALL):
    rng = np.random.default_rng(seed)
    states = []
    for _ in range(n_snap):
        raw = rng.standard_normal((kgrid.size, grid.size)) + 1j * rng.standard_normal((kgrid.size, grid.size))
        states.append(enforce_conjugate(raw, kgrid))
    return Trajectory(np.linspace(0.0, 1.5, n_snap), np.array(states), kgrid, grid)


def heat_envelope(kg, dt=0.5, T=100.0):
    t = dt * np.arange(int(round(T / dt)) + 1)
    return DecayEnvelope(kg.radii, t, np.exp(-np.outer(kg.radii ** 2, t)))


@pytest.fixture(scope="module")
def small_grams(hard_spec):
    from spectral_boltzmann.collision import assemble_all
    return assemble_all(hard_spec, SMALL)


@pytest.fixture(scope="module")
def linear_run(ops6, grid6):
    kg = KGrid.lattice(3, 0.7)
    f0 = np.tile(sqrt_maxwellian(grid6.nodes) * (1 + 0.5 * grid6.nodes[:, 0]), (kg.size, 1)).astype(complex)
    f0 *= np.exp(-kg.radii ** 2)[:, None]
    st = Stepper(ops6["L"].matrix, grid6, kg, 0.1)
    return simulate(SpectralState(f0), st, 4.0)


class TestNormTag:
    def test_rejects_bad_fields(self):
        with pytest.raises(ValueError):
            NormTag(p=0.5)
        for kw in ({"region": "mid"}, {"time": "L1"}, {"vnorm": "H1"}, {"part": "macro"}):
            with pytest.raises(ValueError):
                NormTag(**kw)

    def test_aggregators(self):
        vals = np.array([[1.0, 2.0], [3.0, 0.5]])
        w = np.array([0.5, 0.25])
        assert np.allclose(k_aggregate(vals, w, 1.0), [1.0, 1.625])
        assert np.allclose(k_aggregate(vals, w, INF), [2.0, 3.0])
        assert np.allclose(k_aggregate(vals, w, 2.0), np.sqrt(vals ** 2 @ w))
        assert np.allclose(time_aggregate(vals, np.array([0.0, 1.0]), "sup"), [3.0, 2.0])
        # trapezoid of squares: 0.5 * (1 + 9), 0.5 * (4 + 0.25)
        assert np.allclose(time_aggregate(vals, np.array([0.0, 1.0]), "L2"), np.sqrt([5.0, 2.125]))
        assert k_aggregate(np.zeros((2, 0)), np.zeros(0), 1.0).shape == (2,)


class TestMixedNorm:
    @pytest.mark.parametrize("tag", [NormTag(), NormTag(p=INF), NormTag(time="L2"),
                                     NormTag(region="low", part="micro"),
                                     NormTag(vnorm="macro", multiplier=True, sigma=1.3)])
    def test_zero_state(self, tag):
        tr = Trajectory(np.array([0.0, 1.0]), np.zeros((2, LATTICE.size, SMALL.size), complex),
                        LATTICE, SMALL)
        assert mixed_norm(tr, tag) == 0.0

    def test_one_term_quadrature(self):
        kg = KGrid("lattice", np.zeros((1, 3)), np.array([0.008]), 0.2, 0)
        f = np.zeros(SMALL.size)
        f[0] = 3.0 / math.sqrt(SMALL.weight)
        tr = Trajectory(np.array([0.0]), f[None, None, :].astype(complex), kg, SMALL)
        assert mixed_norm(tr, NormTag(p=1.0, time="sup")) == pytest.approx(0.024, rel=1e-14)

    def test_holder_consistency(self):
        for seed in range(50):
            tr = random_trajectory(seed, n_snap=2)
            p = 1.5 + (seed % 7) * 0.5
            pc = p / (p - 1.0)
            lhs = mixed_norm(tr, NormTag(p=1.0))
            rhs = mixed_norm(tr, NormTag(p=p)) * LATTICE.weights.sum() ** (1.0 / pc)
            assert lhs <= rhs * (1 + 1e-12)

    def test_infinite_exponent_is_max_over_nodes(self):
        tr = random_trajectory(3)
        per_mode = VelocityNorms(tr).values(NormTag()).max(axis=0)
        assert mixed_norm(tr, NormTag(p=INF)) == per_mode.max()

    def test_missing_gram_is_named(self):
        tr = random_trajectory(0)
        with pytest.raises(KeyError, match="D_GRAM"):
            mixed_norm(tr, NormTag(vnorm="D"))

    def test_dissipation_norm_uses_gram(self, small_grams):
        tr = random_trajectory(1, n_snap=1)
        G = small_grams["D_GRAM"].matrix
        f = tr.states[0, 4]
        direct = math.sqrt(max(np.vdot(f, G @ f).real, 0.0))
        vals = VelocityNorms(tr, small_grams).values(NormTag(vnorm="D"))
        assert vals[0, 4] == pytest.approx(direct, rel=1e-12)

    def test_pointwise_returns_series(self):
        tr = random_trajectory(2)
        series = mixed_norm(tr, NormTag(time="pointwise"))
        assert series.shape == (4,)
        assert mixed_norm(tr, NormTag(time="sup")) >= series.max() - 1e-12

    def test_monotone_in_window(self, small_grams):
        tr = random_trajectory(5, n_snap=6)
        for tag in (NormTag(), NormTag(time="L2"), NormTag(time="L2", vnorm="D", part="micro"),
                    NormTag(p=2.0, sigma=1.3)):
            vals = [mixed_norm(tr.window(T), tag, small_grams) for T in tr.times[1:]]
            assert np.all(np.diff(vals) >= -1e-13)

    def test_weight_dominates(self, small_grams):
        tr = random_trajectory(6)
        w = WeightSpec(ell=1.0, q=0.5, gamma2s=2.0)
        for base in (NormTag(), NormTag(time="L2", vnorm="D")):
            plain = mixed_norm(tr, base, small_grams)
            weighted = mixed_norm(tr, NormTag(p=base.p, time=base.time, vnorm=base.vnorm, weight=w),
                                  small_grams)
            assert weighted >= plain

    def test_multiplier_contracts(self):
        tr = random_trajectory(7)
        for p in (1.0, 2.0, INF):
            assert mixed_norm(tr, NormTag(p=p, multiplier=True)) <= mixed_norm(tr, NormTag(p=p))

    def test_region_additivity(self):
        kg = KGrid.lattice(5, 0.5)
        tr = random_trajectory(8, kgrid=kg)
        low = region_mask(kg, "low")
        # |k| = 1 exactly (two lattice steps) must count as low frequency
        assert low[kg.index_of((2, 0, 0))] and not region_mask(kg, "high")[kg.index_of((2, 0, 0))]
        parts = [mixed_norm(tr, NormTag(region=r)) for r in ("low", "high")]
        assert sum(parts) == pytest.approx(mixed_norm(tr, NormTag(region="all")), rel=1e-14)


class TestFunctionals:
    def test_zero_trajectory(self, small_grams):
        tr = Trajectory(np.array([0.0, 1.0]), np.zeros((2, LATTICE.size, SMALL.size), complex),
                        LATTICE, SMALL)
        rep = functional_suite(tr, InterpolationSchedule(p=2.0), small_grams)
        assert all(v == 0.0 for v in rep.values.values())

    def test_pure_macro_has_no_micro_part(self, small_grams):
        from spectral_boltzmann.velocity import MacroProjector
        P = MacroProjector(SMALL)
        rng = np.random.default_rng(0)
        coef = rng.standard_normal((2, LATTICE.size, 5))
        states = np.tensordot(coef, P.basis, axes=([-1], [0])).astype(complex)
        tr = Trajectory(np.array([0.0, 1.0]), states, LATTICE, SMALL)
        rep = functional_suite(tr, InterpolationSchedule(p=2.0), small_grams,
                               weight=WeightSpec(1.0, 0.0, 2.0))
        scale = rep["E1"]
        for name in ("D1", "Dp", "scriptD"):
            assert rep.components[name]["micro_D"] <= 1e-10 * scale
            assert rep.components[name]["w_micro_low_D"] <= 1e-10 * scale
        for name in ("E1", "Ep", "scriptE"):
            assert rep.components[name]["w_micro_low"] <= 1e-10 * scale

    def test_report_serializes(self, small_grams):
        import json
        rep = functional_suite(random_trajectory(0), InterpolationSchedule(p=2.0), small_grams)
        data = json.loads(json.dumps(rep.to_dict()))
        for key in ("E1", "D1", "Ep", "Dp", "scriptE", "scriptD", "N", "thm_hc_c1_lhs", "thm_hc_c2_lhs"):
            assert key in data["values"]
        assert isinstance(rep, FunctionalReport)
        assert rep["E1"] == pytest.approx(sum(rep.components["E1"].values()))

    def test_linear_run(self, linear_run, ops6):
        rep = functional_suite(linear_run, InterpolationSchedule(p=2.0), ops6)
        for name in ("D1", "Dp", "scriptD"):
            assert np.isfinite(rep[name]) and rep[name] > 0
        energy = mixed_norm(linear_run, NormTag(time="pointwise"))
        assert np.all(np.diff(energy) <= 1e-12 * energy[0])
        assert energy[-1] < energy[0]

    def test_functionals_grow_with_window(self, linear_run, ops6):
        sched = InterpolationSchedule(p=2.0)
        reps = [functional_suite(linear_run.window(T), sched, ops6) for T in (1.0, 2.0, 4.0)]
        for key in ("E1", "D1", "scriptE", "scriptD", "N"):
            seq = [r[key] for r in reps]
            assert np.all(np.diff(seq) >= -1e-13)


class TestNFunctional:
    def test_zero(self):
        tr = Trajectory(np.array([0.0]), np.zeros((1, LATTICE.size, SMALL.size), complex), LATTICE, SMALL)
        assert n_functional(tr, InterpolationSchedule(p=2.0)) == 0.0

    def test_macro_free_state(self):
        tr = random_trajectory(4)
        micro = Trajectory(tr.times, tr.micro, LATTICE, SMALL)
        sched = InterpolationSchedule(p=2.0)
        assert macro_sup_term(micro, sched.sigma) < 1e-12
        assert n_functional(micro, sched) == pytest.approx(mixed_norm(micro, NormTag()), rel=1e-12)

    def test_matches_suite(self, linear_run, ops6):
        sched = InterpolationSchedule(p=2.0)
        assert functional_suite(linear_run, sched, ops6)["N"] == pytest.approx(
            n_functional(linear_run, sched), rel=1e-14)


class TestDecayIntegral:
    def test_initial_value(self):
        kg = KGrid.radial_gauss(1.0, 24)
        env = heat_envelope(kg, T=10.0)
        chi = np.exp(-kg.radii)
        series = l1k_decay_integral(env, chi, kg.weights)
        assert series[0] == pytest.approx(float(kg.weights @ chi), rel=1e-14)

    def test_heat_proxy_against_gaussian_integral(self):
        kg = KGrid.radial_gauss(1.0, 32)
        env = heat_envelope(kg)
        series = l1k_decay_integral(env, np.ones(kg.size), kg.weights)
        for t in (10.0, 50.0, 100.0):
            i = int(round(t / 0.5))
            truncated = quad(lambda r: 4 * np.pi * r * r * np.exp(-t * r * r), 0.0, 1.0)[0]
            assert series[i] == pytest.approx(truncated, rel=1e-9)
            assert series[i] == pytest.approx(math.pi ** 1.5 * t ** -1.5, rel=2e-4)
        t = env.times
        sel = t >= 10.0
        slope = np.polyfit(np.log(t[sel]), np.log(series[sel]), 1)[0]
        assert slope == pytest.approx(-1.5, abs=0.05)

    def test_marginal_profile(self):
        p = 2.0
        kg = KGrid.radial_gauss(1.0, 32)
        env = heat_envelope(kg)
        chi = kg.radii ** (-3.0 / (p / (p - 1.0)) + 0.01)
        series = l1k_decay_integral(env, chi, kg.weights)
        for t in (10.0, 50.0):
            oracle = quad(lambda r: 4 * np.pi * r ** 0.51 * np.exp(-t * r * r), 0.0, 1.0)[0]
            assert series[int(round(t / 0.5))] == pytest.approx(oracle, rel=1e-8)
        slope, _ = fit_decay_rate(env.times, series, (25.0, 100.0))
        assert slope == pytest.approx(-1.5 * (1 - 1 / p), abs=0.15)

    def test_marginal_profile_true_envelope(self, ops6, grid6):
        kg = KGrid.radial_gauss(1.0, 16)
        g0 = sqrt_maxwellian(grid6.nodes) * (1 + grid6.nodes[:, 2] + 0.3 * (grid6.speed2 - 3))
        env = radial_decay_envelope(ops6["L"].matrix, grid6, kg.radii, g0, 0.5, 100.0)
        series = l1k_decay_integral(env, kg.radii ** -1.49, kg.weights)
        slope, _ = fit_decay_rate(env.times, series, (25.0, 100.0))
        assert slope == pytest.approx(-0.75, abs=0.15)

    def test_coarse_grid_rejected(self):
        kg = KGrid.radial([0.2, 0.5, 0.9], [0.1, 0.5, 2.0])
        env = heat_envelope(kg, T=1.0)
        with pytest.raises(QuadratureError, match="quadrature error"):
            l1k_decay_integral(env, np.ones(3), kg.weights)


class TestFitDecayRate:
    def test_exact_power_law(self):
        t = np.linspace(0.0, 100.0, 201)
        slope, width = fit_decay_rate(t, (1 + t) ** -1.5)
        assert slope == pytest.approx(-1.5, abs=1e-10)
        assert width < 1e-10

    def test_constant(self):
        t = np.linspace(0.0, 10.0, 21)
        slope, _ = fit_decay_rate(t, np.full_like(t, 2.5))
        assert abs(slope) < 1e-12

    def test_heat_proxy_infinite_p(self):
        kg = KGrid.radial_gauss(1.0, 32)
        env = heat_envelope(kg)
        series = l1k_decay_integral(env, np.ones(kg.size), kg.weights)
        slope, _ = fit_decay_rate(env.times, series, (25.0, 100.0))
        assert -1.65 <= slope <= -1.35

    def test_default_window_is_last_three_quarters(self):
        t = np.linspace(0.0, 8.0, 9)
        y = np.where(t < 2.0, 1.0, (1 + t) ** -2.0)
        assert fit_decay_rate(t, y)[0] == pytest.approx(-2.0, abs=1e-12)

    def test_too_few_samples(self):
        with pytest.raises(ValueError, match="at least 5"):
            fit_decay_rate([0, 1, 2, 3], [1, 1, 1, 1])

    def test_nonpositive_values(self):
        with pytest.raises(ValueError, match="positive"):
            fit_decay_rate(np.arange(6.0), [1, 1, 0, 1, 1, 1], (0.0, 5.0))


class TestSchedule:
    def test_p_three_halves_rejected(self):
        with pytest.raises(ValueError, match="p>3/2"):
            InterpolationSchedule(p=1.5)

    def test_p_two(self):
        s = InterpolationSchedule(p=2.0, eps=0.1)
        assert s.sigma == pytest.approx(1.3, abs=1e-14)
        assert s.omega == pytest.approx(2.4, abs=1e-14)
        assert s.theta_hard == pytest.approx(1 / 2.4, abs=1e-14)
        assert s.frequency_exponent == pytest.approx(2.8, abs=1e-13)
        assert s.frequency_exponent < 3.0

    def test_infinite_p(self):
        s = InterpolationSchedule(p=INF, eps=0.1)
        assert s.p_conj == 1.0 and s.inv_p == 0.0
        assert s.sigma == pytest.approx(2.8) and s.omega == pytest.approx(3.9)

    def test_eps_range(self):
        with pytest.raises(ValueError, match="eps"):
            InterpolationSchedule(p=2.0, eps=0.3)

    def test_soft_index_condition(self):
        s = InterpolationSchedule(p=2.0, eps=0.1, ell=100.0, soft=True)
        # r_max = 2 * 0.1 / 5
        assert s.r_max == pytest.approx(0.04)
        assert s.j_value > s.sigma / (2 * s.r_value)
        with pytest.raises(ValueError, match="index condition"):
            InterpolationSchedule(p=2.0, eps=0.1, ell=1.0, q=0.0, soft=True)
        with pytest.raises(ValueError, match="r="):
            InterpolationSchedule(p=2.0, eps=0.1, ell=100.0, r=0.05, soft=True)

    def test_young_constant_is_sharp(self):
        theta, eta = 0.4, 0.3
        C = young_constant(theta, eta)
        A = np.linspace(0.01, 50, 5000)
        lhs = A ** (1 - theta)
        assert np.all(lhs <= eta * A + C + 1e-12)
        assert np.min(eta * A + C - lhs) < 1e-5
