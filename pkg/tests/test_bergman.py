import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import comb
from scipy.stats import unitary_group

from conftest import p1, product, random_positive, random_traceless
from rbal.bergman import (InnerProduct, Quantization, aubin_yau_directional, bergman_density, fs, hilb,
                          h_operator, load_inner_product, moment_data, orthonormal_gram_inverse,
                          q_operator, rho_tilde, round_inner_product, save_inner_product, t_operator)
from rbal.errors import ConditioningError, ConfigError, ValidationError
from rbal.expansion import fit_power_law, sphere_metric
from rbal.geometry import FiberMetric, SectionFrame


def _w(frame):
    return np.tan(frame.grid.params[:, 0] / 2) * np.exp(1j * frame.grid.params[:, 1])


def _round_h(frame):
    return FiberMetric(frame.reference_potential.copy())


# ---------------------------------------------------------------- inner products


def test_gram_inverse_identity():
    np.testing.assert_allclose(orthonormal_gram_inverse(np.eye(4)), np.eye(4), atol=1e-15)


def test_gram_inverse_diagonal():
    d = np.array([1.0, 2.0, 5.0])
    np.testing.assert_allclose(orthonormal_gram_inverse(np.diag(d)), np.diag(1 / d), rtol=1e-15)


def test_gram_inverse_random(rng):
    H = random_positive(rng, 6)
    np.testing.assert_allclose(orthonormal_gram_inverse(H) @ H, np.eye(6), atol=1e-12)


def test_gram_inverse_conditioning_guard():
    with pytest.raises(ConditioningError):
        orthonormal_gram_inverse(np.diag([1.0, 1e-13]))


def test_inner_product_rejects_non_hermitian():
    with pytest.raises(ValidationError):
        InnerProduct(np.array([[1.0, 1.0], [0.0, 1.0]]), 1)


def test_inner_product_file_round_trip(tmp_path, rng):
    ip = InnerProduct(random_positive(rng, 5), 4)
    save_inner_product(ip, tmp_path / "H.json")
    back = load_inner_product(tmp_path / "H.json")
    np.testing.assert_array_equal(back.H, ip.H)
    assert back.level_k == 4


def test_inner_product_parse_error(tmp_path):
    (tmp_path / "bad.json").write_text('{"level_k": 1, "dim": 2, "entries": [[1, 2]]}')
    with pytest.raises(ValidationError, match="parse error|shape"):
        load_inner_product(tmp_path / "bad.json")


# ---------------------------------------------------------------- FS and Hilb


@pytest.mark.parametrize("k", [1, 3, 6])
def test_fs_round_potential(k):
    # binomial identity sum C(k, j) |w|^(2j) = (1 + |w|^2)^k
    fr = p1(k)
    h = fs(fr, round_inner_product(k))
    np.testing.assert_allclose(h.phi, k * np.log1p(np.abs(_w(fr)) ** 2), rtol=1e-12, atol=1e-12)


def test_fs_scale_gauge(rng):
    fr = p1(3)
    H = random_positive(rng, 4)
    np.testing.assert_allclose(fs(fr, 2.5 * H).phi, fs(fr, H).phi - math.log(2.5), atol=1e-12)


def test_fs_orthonormal_sum(rng):
    fr = p1(4)
    H = random_positive(rng, 5)
    h = fs(fr, H)
    L = np.linalg.cholesky(H)
    zhat = fr.Z @ np.linalg.inv(L).T
    idx = rng.choice(fr.n_points, 100, replace=False)
    total = np.sum(np.abs(zhat[idx]) ** 2, axis=1) * np.exp(-h.phi[idx])
    np.testing.assert_allclose(total, 1.0, atol=1e-12)


@pytest.mark.parametrize("k", range(1, 11))
def test_hilb_round_closed_form(k):
    # beta integral: int |w|^(2j) (1 + |w|^2)^(-k-2) 2 dA = 2 pi j! (k-j)! / (k+1)!
    fr = p1(k)
    target = np.diag(1.0 / comb(k, np.arange(k + 1)))
    np.testing.assert_allclose(hilb(fr, _round_h(fr)).H, target, atol=1e-10)
    np.testing.assert_allclose(hilb(fr, FiberMetric(fr.reference_potential + 0.0)).H, target, atol=1e-10)


def test_hilb_round_potential_path():
    # without the analytic shortcut the metric comes from stencils
    fr = p1(5)
    h = FiberMetric(5 * np.log1p(np.abs(_w(fr)) ** 2))
    np.testing.assert_allclose(hilb(fr, h).H, np.diag(1.0 / comb(5, np.arange(6))), atol=1e-10)


def test_hilb_torus_invariant_block_diagonal():
    fr = p1(4)
    H = hilb(fr, sphere_metric(fr, 0.2, "mixed")).H
    off = H - np.diag(np.diag(H))
    assert np.max(np.abs(off)) < 1e-13 * np.max(np.abs(H))


def test_hilb_scaling():
    fr = p1(3)
    h = sphere_metric(fr, 0.1, "p2")
    a = hilb(fr, h).H
    b = hilb(fr, FiberMetric(h.phi - 0.7)).H
    np.testing.assert_allclose(b, math.exp(0.7) * a, rtol=0, atol=1e-12 * np.abs(b).max())


@given(st.integers(0, 2**31))
def test_hilb_positive_property(seed):
    rng = np.random.default_rng(seed)
    fr = p1(3, 32, 64)
    th, ph = fr.grid.params[:, 0], fr.grid.params[:, 1]
    c = 0.05 * rng.normal(size=3)
    u = c[0] * np.cos(th) + c[1] * np.cos(th) ** 2 + c[2] * np.sin(th) ** 2 * np.cos(2 * ph)
    H = hilb(fr, FiberMetric(fr.reference_potential + u)).H
    assert np.max(np.abs(H - H.conj().T)) < 1e-14 * np.abs(H).max()
    assert np.linalg.eigvalsh(H)[0] > 0


# ---------------------------------------------------------------- T operator and moments


@pytest.mark.parametrize("k", [2, 5, 8])
def test_t_operator_round_fixed(k):
    H = round_inner_product(k).H
    T = t_operator(p1(k), H).H
    c = np.trace(T).real / np.trace(H).real
    np.testing.assert_allclose(T, c * H, atol=1e-10)


def test_t_operator_scale_covariant(rng):
    fr = p1(4)
    H = random_positive(rng, 5)
    np.testing.assert_allclose(t_operator(fr, 3.0 * H).H, 3.0 * t_operator(fr, H).H, rtol=1e-11)


def test_t_iteration_monotone_start():
    fr = p1(4)
    H = random_positive(np.random.default_rng(7), 5)
    norms = []
    for _ in range(6):
        md = moment_data(fr, H)
        norms.append(np.linalg.norm(md.M, 2))
        H = t_operator(fr, H).H
    assert all(b < a for a, b in zip(norms, norms[1:]))


@pytest.mark.parametrize("k", range(1, 11))
def test_moment_balanced_round(k):
    md = moment_data(p1(k), round_inner_product(k))
    np.testing.assert_allclose(md.mu_bar, 2 * math.pi / (k + 1) * np.eye(k + 1), atol=1e-10)
    assert abs(md.c_value - 2 * math.pi / (k + 1)) < 1e-10


def test_moment_pointwise_trace(rng):
    md = moment_data(p1(3), random_positive(rng, 4))
    mu = md.mu_pointwise()
    np.testing.assert_allclose(np.einsum("pii->p", mu).real, 1.0, atol=1e-14)
    ev = np.linalg.eigvalsh(mu[:50])
    assert np.all(ev[:, :-1] > -1e-15) and np.allclose(ev[:, -1], 1.0)


def test_moment_torus_equivariant():
    H = np.diag([1.0, 0.5, 1.0]) @ np.diag(1.0 / comb(2, np.arange(3)))
    mb = moment_data(p1(2), H).mu_bar
    assert np.max(np.abs(mb - np.diag(np.diag(mb)))) < 1e-14


def test_moment_unitary_equivariance(rng):
    # rotating the sections by U maps H to U H U^dagger and T(H) to U T(H) U^dagger
    fr = p1(3, 32, 64)
    U = unitary_group.rvs(4, random_state=3)
    rot = SectionFrame(fr.level_k, fr.dim, fr.grid, fr.Z @ U.T, fr.dZ @ U.T, volume_V=fr.volume_V)
    H = random_positive(rng, 4)
    H2 = U @ H @ U.conj().T
    np.testing.assert_allclose(np.linalg.eigvalsh(moment_data(rot, H2).mu_bar),
                               np.linalg.eigvalsh(moment_data(fr, H).mu_bar), atol=1e-13)
    np.testing.assert_allclose(t_operator(rot, H2).H, U @ t_operator(fr, H).H @ U.conj().T, atol=1e-12)


# ---------------------------------------------------------------- densities


def test_bergman_density_round_constant():
    rho = bergman_density(p1(6), _round_h(p1(6)))
    assert np.std(rho) / np.mean(rho) < 1e-8
    assert np.all(rho > 0)


def test_density_consistent_with_t_operator(rng):
    fr = p1(4)
    H = random_positive(rng, 5)
    np.testing.assert_allclose(hilb(fr, fs(fr, H)).H, t_operator(fr, H).H, rtol=1e-12, atol=1e-14)


def test_density_positive_perturbed():
    fr = p1(5)
    assert np.all(bergman_density(fr, sphere_metric(fr, 0.2, "mixed")) > 0)


def test_fs_hilb_fs_idempotent(rng):
    fr = p1(3)
    h1 = fs(fr, random_positive(rng, 4))
    H = hilb(fr, h1)
    # FS(Hilb(FS(H))) is FS(T(H)); both are Fubini-Study potentials, compare after removing the gauge
    d = fs(fr, H).phi - fs(fr, t_operator(fr, np.linalg.inv(h1.K)).H).phi
    assert np.ptp(d) < 1e-11


def test_rho_tilde_round_constant():
    fr = p1(8)
    rt = rho_tilde(fr, _round_h(fr))
    assert np.ptp(rt) / np.mean(rt) < 1e-6


def test_rho_tilde_perturbed_decay():
    # the canonical 0.1 cos(theta) perturbation
    ks = list(range(4, 17))
    vals = []
    for k in ks:
        fr = p1(k, 96, 192)
        rt = rho_tilde(fr, sphere_metric(fr, 0.1, "p1"))
        w = fr.grid.weights
        vals.append(np.max(np.abs(rt - np.sum(rt * w) / np.sum(w))))
    e, *_ = fit_power_law(ks, vals)
    assert abs(e + 1) <= 0.2


def test_rho_tilde_richardson():
    # k (rho_k - 1) = a_1 + a_2 / k + ..., so successive differences shrink like k^-2
    prof = {}
    for k in range(8, 17):
        fr = p1(k, 96, 192)
        prof[k] = k * (rho_tilde(fr, sphere_metric(fr, 0.1, "mixed")) - 1.0)
    d = [k * k * np.max(np.abs(prof[k + 1] - prof[k])) for k in range(8, 16)]
    assert max(d) / min(d) < 2.0


# ---------------------------------------------------------------- Q and H operators


def test_q_constant():
    fr = p1(5)
    Q = q_operator(fr, sphere_metric(fr, 0.1, "mixed"), np.full(fr.n_points, 3.0))
    np.testing.assert_allclose(Q, 3.0 * fr.volume_V / fr.dim * np.eye(fr.dim), atol=1e-12)


def test_q_antipodal_odd():
    fr = p1(6)
    Q = q_operator(fr, _round_h(fr), np.cos(fr.grid.params[:, 0]) ** 3)
    d = np.diag(Q).real
    np.testing.assert_allclose(d, -d[::-1], atol=1e-13)


def test_q_trace_square_expansion():
    # tr(Qhat(f)^2) = k ||f||^2 + O(1) with ||f||^2 against omega / (2 pi); the O(1) term converges
    diffs = []
    for k in range(4, 13):
        fr = p1(k)
        qz = Quantization(fr, _round_h(fr))
        f = np.cos(fr.grid.params[:, 0])
        Q = qz.q_hat(f)
        norm2 = np.sum(f**2 * qz.kd.unit_measure) / (2 * math.pi)
        diffs.append(np.trace(Q @ Q).real - k * norm2)
    diffs = np.array(diffs)
    assert np.all(np.abs(diffs) < 1.0)
    assert abs(diffs[-1] - diffs[-2]) < abs(diffs[1] - diffs[0])


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_q_linearity_property(a, b):
    fr = p1(3, 32, 64)
    qz = Quantization(fr, _round_h(fr))
    f, g = np.cos(fr.grid.params[:, 0]), np.sin(fr.grid.params[:, 0]) ** 2
    np.testing.assert_allclose(qz.q(a * f + b * g), a * qz.q(f) + b * qz.q(g), atol=1e-12)


def test_h_identity():
    md = moment_data(p1(3), round_inner_product(3))
    np.testing.assert_allclose(h_operator(md, np.eye(4)), 1.0, atol=1e-14)


def test_h_round_k1():
    fr = p1(1)
    md = moment_data(fr, round_inner_product(1))
    np.testing.assert_allclose(h_operator(md, np.diag([0.5, -0.5])), 0.5 * np.cos(fr.grid.params[:, 0]),
                               atol=1e-14)


def test_h_dimension_mismatch():
    md = moment_data(p1(2), round_inner_product(2))
    with pytest.raises(ConfigError):
        h_operator(md, np.eye(4))


@given(st.integers(0, 2**31))
def test_pointwise_moment_identity_property(seed):
    from rbal.stability import split_from_moment
    rng = np.random.default_rng(seed)
    fr = p1(4, 16, 32)
    md = moment_data(fr, random_positive(rng, 5))
    A, B = random_traceless(rng, 5), random_traceless(rng, 5)
    xa, xb = split_from_moment(md, A).xi, split_from_moment(md, B).xi
    u = md.zhat
    lhs = h_operator(md, A) * h_operator(md, B) + np.einsum("pi,pi->p", xa.conj(), xb)
    rhs = np.einsum("pi,ij,pj->p", u.conj(), A @ B, u)
    assert np.max(np.abs(lhs - rhs)) < 1e-12


@given(st.integers(0, 2**31), st.floats(-2, 2))
def test_h_linearity_property(seed, a):
    rng = np.random.default_rng(seed)
    md = moment_data(p1(3, 16, 32), random_positive(rng, 4))
    A, B = random_traceless(rng, 4), random_traceless(rng, 4)
    np.testing.assert_allclose(h_operator(md, a * A + B), a * h_operator(md, A) + h_operator(md, B), atol=1e-12)


# ---------------------------------------------------------------- energy derivative


def test_aubin_yau_identity_direction(rng):
    fr = p1(4)
    H = random_positive(rng, 5)
    assert abs(aubin_yau_directional(fr, H, np.eye(5)) - fr.volume_V) < 1e-10


def test_aubin_yau_critical_at_balanced(rng):
    fr = p1(5)
    H = round_inner_product(5)
    for _ in range(5):
        assert abs(aubin_yau_directional(fr, H, random_traceless(rng, 6))) < 1e-9


def test_aubin_yau_antisymmetric(rng):
    fr = p1(3)
    H, A = random_positive(rng, 4), random_traceless(rng, 4)
    assert aubin_yau_directional(fr, H, -A) == -aubin_yau_directional(fr, H, A)


def test_balanced_characterization_correlates():
    fr = p1(4)
    H = random_positive(np.random.default_rng(11), 5)
    r_mu, r_t = [], []
    for _ in range(12):
        md = moment_data(fr, H)
        r_mu.append(np.linalg.norm(md.M) / np.linalg.norm(md.mu_bar))
        T = t_operator(fr, H).H
        c = np.trace(T @ H.conj().T).real / np.trace(H @ H.conj().T).real
        r_t.append(np.linalg.norm(T - c * H) / np.linalg.norm(T))
        H = T
    assert np.corrcoef(np.log(r_mu), np.log(r_t))[0, 1] > 0.95


def test_product_moment_balanced():
    fr = product(1)
    md = moment_data(fr, np.eye(4))
    np.testing.assert_allclose(md.mu_bar, fr.volume_V / 4 * np.eye(4), atol=1e-10)
