import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import p1
from rbal.bergman import Quantization
from rbal.calibration import load_calibration
from rbal.errors import ConfigError, UnsupportedError
from rbal.expansion import (ExpansionFit, build_F_l, c_A_decay, cor51_residual, equivariant_trace_check,
                            fit_power_law, rotation_hamiltonian, run_observable, sphere_metric, thm2_residual,
                            verify_hq, verify_tyz)

K_DEFAULT = range(4, 17)


# ---------------------------------------------------------------- fitting


@given(st.floats(-3, 3), st.floats(0.1, 10))
def test_fit_recovers_power_law(e, c):
    ks = np.arange(4, 17)
    exp, coef, se, res = fit_power_law(ks, c * ks**e)
    assert abs(exp - e) < 1e-10 and abs(coef / c - 1) < 1e-10 and res < 1e-10


def test_fit_double_weights_largest():
    ks = np.array([2.0, 3.0, 4.0, 5.0])
    vals = np.array([1.0, 0.5, 0.3, 0.2])
    w = np.array([1, 1, 2, 2.0])
    X = np.stack([np.ones(4), np.log(ks)], axis=1)
    beta = np.linalg.lstsq(X * np.sqrt(w)[:, None], np.log(vals) * np.sqrt(w), rcond=None)[0]
    assert abs(fit_power_law(ks, vals)[0] - beta[1]) < 1e-12


def test_fit_rejects_bad_input():
    with pytest.raises(ConfigError):
        fit_power_law([4], [1.0])
    with pytest.raises(ConfigError):
        fit_power_law([4, 5], [1.0, -1.0])


def test_fit_serialization(tmp_path):
    fit = ExpansionFit("x", [4, 5], [0.25, 0.2], -1.0, 1.0, 0.0, 0.0, correlations=[0.9, 0.95])
    fit.save(tmp_path, seed=3)
    doc = json.loads((tmp_path / "fit.json").read_text())
    assert doc["seed"] == 3 and doc["exponent"] == -1.0
    lines = (tmp_path / "series.csv").read_text().splitlines()
    assert lines[0] == "k,value,profile_correlation" and lines[1].startswith("4,0.25,0.9")


# ---------------------------------------------------------------- H_k Q_k


def test_hq_constant_exact():
    fit = verify_hq(K_DEFAULT, f_coeffs=(1.0,))
    assert fit.extra.get("exact") and max(fit.values) < 1e-10


def test_hq_round_closed_form():
    # cos(theta) is a degree-one harmonic; its Berezin eigenvalue at level k is k / (k + 2)
    fit = verify_hq(K_DEFAULT)
    norm = math.sqrt(2 * math.pi / 3)
    for k, v in zip(fit.k_values, fit.values):
        assert abs(v / (norm * 2 / (k + 2)) - 1) < 1e-10


def test_hq_round_exponent():
    fit = verify_hq(K_DEFAULT)
    assert min(fit.correlations) >= 0.99
    assert abs(fit.exponent + 1) <= 0.15


def test_hq_linearity():
    a, b = verify_hq(K_DEFAULT), verify_hq(K_DEFAULT, f_coeffs=(0.0, 2.0))
    assert abs(a.exponent - b.exponent) < 1e-10
    assert abs(b.coefficient / a.coefficient - 2) < 1e-10


def test_hq_needs_four_levels():
    with pytest.raises(ConfigError):
        verify_hq([4, 5, 6])


def test_hq_perturbed_profile():
    fit = verify_hq(range(12, 17), amplitude=0.1)
    assert min(fit.correlations) >= 0.99


# ---------------------------------------------------------------- density expansion


def test_tyz_round_constant():
    fit = verify_tyz([12, 13], amplitude=0.0)
    assert fit.extra["profile_variation"][0] < 1e-5


def test_tyz_perturbed_correlation():
    fit = verify_tyz(range(12, 17))
    assert fit.correlations[-1] >= 0.98
    assert fit.extra["extrapolated_correlation"] >= 0.98


def test_tyz_calibration_cross_validation():
    r = [verify_tyz(range(12, 17), profile=p).extra["extrapolated_ratio"] for p in ("p2", "p3", "mixed")]
    assert max(r) / min(r) - 1 < 0.05
    assert all(abs(x - 1) < 0.05 for x in r)


def test_tyz_grid_doubling():
    a = verify_tyz(range(4, 13), grid=(64, 128))
    b = verify_tyz(range(4, 13), grid=(128, 256))
    assert abs(b.coefficient / a.coefficient - 1) < 0.1


# ---------------------------------------------------------------- c_A


def test_ca_decay_exponent():
    assert c_A_decay(range(2, 13)).exponent <= -1.5 + 0.3


def test_ca_zero_direction():
    fit = c_A_decay(range(2, 6), sign=0.0)
    assert fit.extra["c_A"] == [0.0] * 4


def test_ca_sign_flip():
    a, b = c_A_decay(range(2, 8)), c_A_decay(range(2, 8), sign=-1.0)
    assert a.extra["c_A"] == [-c for c in b.extra["c_A"]]


def test_ca_grid_doubling():
    a, b = c_A_decay(range(2, 13), grid=(64, 128)), c_A_decay(range(2, 13), grid=(128, 256))
    assert abs(b.coefficient / a.coefficient - 1) < 0.1


# ---------------------------------------------------------------- truncated solutions


def _round_hx(k):
    fr = p1(k)
    qz = Quantization(fr, sphere_metric(fr))
    return fr, qz, rotation_hamiltonian(qz)


def test_F_zero_field():
    fr, qz, _ = _round_hx(4)
    for l in (0, 1):
        assert not np.any(build_F_l(qz.kd, np.zeros(fr.n_points), l, 4))


def test_F1_round_eigenfunction():
    fr, qz, HX = _round_hx(6)
    cos = np.cos(fr.grid.params[:, 0])
    np.testing.assert_allclose(HX, -0.5 * cos, atol=1e-12)
    d = build_F_l(qz.kd, HX, 1, 6) - build_F_l(qz.kd, HX, 0, 6)
    # cos is a Laplace eigenfunction; the difference is a fixed multiple of it
    ratio = d[np.abs(cos) > 0.1] / cos[np.abs(cos) > 0.1]
    assert np.ptp(ratio) < 1e-6 and abs(ratio[0]) > 1e-3


def test_F_average_zero():
    fr = p1(5)
    qz = Quantization(fr, sphere_metric(fr, 0.1, "mixed"))
    HX = rotation_hamiltonian(qz)
    for l in (0, 1):
        assert abs(qz.kd.mean(build_F_l(qz.kd, HX, l, 5))) < 1e-10


def test_F_unsupported_orders():
    fr, qz, HX = _round_hx(2)
    with pytest.raises(UnsupportedError):
        build_F_l(qz.kd, HX, 2, 2)
    with pytest.raises(ConfigError):
        build_F_l(qz.kd, HX, -1, 2)


def test_truncation_residual_zero_field():
    fits = thm2_residual(range(4, 9), generator_scale=0.0)
    for l in (0, 1):
        assert max(fits[l].values) == 0.0


def test_truncation_residual_optimal_constant():
    fits = thm2_residual(range(4, 13))
    for l in (0, 1):
        assert all(a <= b for a, b in zip(fits[l].values, fits[l].extra["residual_c_zero"]))


def test_truncation_higher_order_not_slower():
    fits = thm2_residual(K_DEFAULT)
    assert fits[1].exponent <= fits[0].exponent


# ---------------------------------------------------------------- equivariant trace


def test_equivariant_trace_closed_form():
    fit = equivariant_trace_check(range(1, 17))
    assert fit.extra["tr_A2"] == fit.extra["closed_form"]


def test_equivariant_trace_limit():
    fit = equivariant_trace_check()
    assert abs(fit.extra["int_HX2"] - math.pi / 6) < 1e-10
    assert abs(fit.extra["gamma_V"] - 1 / (2 * math.pi)) < 1e-10
    assert abs(fit.extra["gamma_V"] * fit.extra["int_HX2"] - 1 / 12) < 1e-10
    assert abs(load_calibration()["gamma_V"] - 1 / (2 * math.pi)) < 1e-12


# ---------------------------------------------------------------- fitted moment residual


def test_fitted_moment_residual_round_zero():
    fit = cor51_residual(K_DEFAULT, amplitude=0.0)
    assert max(fit.values) < 1e-12


def test_fitted_moment_residual_perturbed_decay():
    assert cor51_residual(K_DEFAULT).exponent <= -1 + 0.3


def test_fitted_moment_residual_fit_reduces_residual():
    fit = cor51_residual(K_DEFAULT)
    for a, b in zip(fit.extra["frobenius_fitted"], fit.extra["frobenius_without_fit"]):
        assert a <= b * (1 + 1e-12)


# ---------------------------------------------------------------- dispatch


def test_run_observable_rejects():
    with pytest.raises(ConfigError):
        run_observable("bogus", K_DEFAULT)
    with pytest.raises(ConfigError):
        run_observable("tyz", [4])


def test_run_observable_deterministic():
    a = run_observable("ca", range(2, 8))[0].to_dict()
    b = run_observable("ca", range(2, 8))[0].to_dict()
    assert a == b
