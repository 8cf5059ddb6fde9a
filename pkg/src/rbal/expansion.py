"""Numerical checks of the large-``k`` expansions on sphere geometries.

All families share one fixed Kahler metric ``omega`` in ``2 pi c_1(O(1))``, given by a level-one
potential increment ``u`` over the round metric; at level ``k`` the fiber potential is
``k (log(1 + |w|^2) + u)``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre

from .bergman import Quantization, atomic_write_json, h_operator, moment_data
from .calibration import load_calibration
from .errors import ConfigError, UnsupportedError
from .geometry import (FiberMetric, KahlerData, SectionFrame, build_p1_backend, default_grid,
                       gradient_pairing, laplacian, metric_from_potential, potential_with_increment,
                       scalar_curvature)
from .symmetry import lie_rep, project_VT, torus_basis, weight_blocks, frobenius

__all__ = [
    "ExpansionFit",
    "fit_power_law",
    "legendre_profile",
    "sphere_metric",
    "calibrated_laplacian",
    "verify_hq",
    "hq_profiles",
    "verify_tyz",
    "tyz_profiles",
    "c_A_decay",
    "build_F_l",
    "rotation_hamiltonian",
    "thm2_residual",
    "equivariant_trace_check",
    "cor51_residual",
    "moment_offset_decay",
    "OBSERVABLES",
    "run_observable",
]


# ---------------------------------------------------------------- fits


@dataclass(eq=False)
class ExpansionFit:
    """Power-law fit ``value ~ coefficient * k^exponent``.

    Attributes
    ----------
    observable : str
    k_values : list of int
    values : list of float
    exponent, coefficient : float
    exponent_stderr : float
        Standard error of the weighted log-log slope (the confidence band).
    residual : float
        Weighted RMS of the log-log residuals.
    correlations : list of float
        Per-``k`` correlation of the rescaled profile with the comparison profile (NaN if none).
    comparison : str
        Name of the comparison profile.
    extra : dict
        Observable-specific scalars.
    profiles : dict
        Per-``k`` grid profiles (not serialized).
    """

    observable: str
    k_values: list
    values: list
    exponent: float = float("nan")
    coefficient: float = float("nan")
    exponent_stderr: float = float("nan")
    residual: float = float("nan")
    correlations: list = field(default_factory=list)
    comparison: str = ""
    extra: dict = field(default_factory=dict)
    profiles: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {"observable": self.observable, "k_values": [int(k) for k in self.k_values],
                "values": [float(v) for v in self.values], "exponent": self.exponent,
                "coefficient": self.coefficient, "exponent_stderr": self.exponent_stderr,
                "residual": self.residual, "comparison": self.comparison,
                "correlations": [float(c) for c in self.correlations],
                "extra": {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.extra.items()}}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "value", "profile_correlation"])
        corr = self.correlations or [float("nan")] * len(self.k_values)
        for k, v, c in zip(self.k_values, self.values, corr):
            w.writerow([int(k), repr(float(v)), repr(float(c))])
        return buf.getvalue()

    def save(self, directory, seed=None) -> None:
        import os
        os.makedirs(directory, exist_ok=True)
        doc = self.to_dict()
        if seed is not None:
            doc["seed"] = seed
        atomic_write_json(os.path.join(directory, "fit.json"), doc)
        path = os.path.join(directory, "series.csv")
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            fh.write(self.to_csv())
        os.replace(tmp, path)


def fit_power_law(k_values, values):
    """Weighted least squares of ``log value`` on ``log k``; the two largest ``k`` count twice.

    Returns
    -------
    exponent, coefficient, stderr, residual : float
    """
    k = np.asarray(k_values, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if k.size < 2:
        raise ConfigError("a power-law fit needs at least two k values")
    if np.any(~(v > 0)):
        raise ConfigError("log-log fit requires strictly positive values")
    w = np.ones_like(k)
    w[np.argsort(k)[-2:]] = 2.0
    X = np.stack([np.ones_like(k), np.log(k)], axis=1)
    y = np.log(v)
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    r = y - X @ coef
    rms = float(np.sqrt(np.sum(w * r**2) / np.sum(w)))
    dof = max(k.size - 2, 1)
    cov = np.linalg.inv((X * w[:, None]).T @ X) * (np.sum(w * r**2) / dof)
    return float(coef[1]), float(math.exp(coef[0])), float(np.sqrt(max(cov[1, 1], 0.0))), rms


def _fit(name, ks, vals, **kw):
    e, c, se, res = fit_power_law(ks, vals)
    return ExpansionFit(name, list(ks), [float(v) for v in vals], e, c, se, res, **kw)


def _corr(a, b, w):
    """Measure-weighted Pearson correlation (NaN if either profile is constant)."""
    wa = np.sum(w)
    a0 = a - np.sum(a * w) / wa
    b0 = b - np.sum(b * w) / wa
    na, nb = np.sqrt(np.sum(w * a0**2)), np.sqrt(np.sum(w * b0**2))
    scale_a = max(np.max(np.abs(a)), 1e-300)
    scale_b = max(np.max(np.abs(b)), 1e-300)
    if na < 1e-12 * scale_a * np.sqrt(wa) or nb < 1e-12 * scale_b * np.sqrt(wa):
        return float("nan")
    return float(np.sum(w * a0 * b0) / (na * nb))


def _extrapolate_leading(ks, profiles, order: int = 3):
    """Per-point least squares of ``p_k = a + b/k + ... `` (up to ``k^-order``); returns ``a``."""
    ks = np.asarray(ks, dtype=np.float64)
    m = min(order, ks.size - 1)
    X = np.stack([ks**-j for j in range(m + 1)], axis=1)
    Y = np.stack(profiles, axis=0)
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
    return coef[0]


# ---------------------------------------------------------------- sphere metrics


def legendre_profile(frame: SectionFrame, coeffs, factor: int = 0) -> np.ndarray:
    """``sum_l c_l P_l(cos theta)`` on the given sphere factor of a structured frame."""
    if not frame.grid.structured:
        raise ConfigError("Legendre profiles need a structured sphere grid")
    theta = frame.grid.params[:, 2 * factor]
    return legendre.legval(np.cos(theta), np.asarray(coeffs, dtype=np.float64))


PERTURBATIONS = {
    "round": (),
    "p1": (0.0, 1.0),
    "p2": (0.0, 0.0, 1.0 / 6.0),
    "p3": (0.0, 0.0, 0.0, 1.0 / 12.0),
    "mixed": (0.0, 0.0, 1.0 / 12.0, 1.0 / 24.0),
}
"""Level-one increments ``u``; ``P_l`` is divided by ``l(l+1)`` so that the area density of
``omega_round + amplitude * i d dbar u`` stays within ``1 +- amplitude``."""


def sphere_metric(frame: SectionFrame, amplitude: float = 0.0, profile="mixed") -> FiberMetric:
    """Fiber metric at the frame's level for the level-one metric ``omega_round + a i d dbar u``.

    Parameters
    ----------
    profile : str or sequence
        Key of :data:`PERTURBATIONS` or explicit Legendre coefficients of ``u``.
    """
    coeffs = PERTURBATIONS[profile] if isinstance(profile, str) else tuple(profile)
    if amplitude == 0.0 or not coeffs:
        return FiberMetric(frame.reference_potential.copy())
    u = amplitude * legendre_profile(frame, coeffs)
    return potential_with_increment(frame, frame.level_k * u)


def calibrated_laplacian(kd: KahlerData, f) -> np.ndarray:
    """Laplacian of the level-one metric scaled by the calibrated ``gamma_Delta``.

    With this operator the first correction of ``H_k Q_k`` is ``-2 Delta f``.
    """
    return load_calibration()["gamma_Delta"] * kd.level * laplacian(kd, f)


def _family(k_values, grid=None):
    ks = [int(k) for k in k_values]
    if grid is None:
        grid = default_grid(max(ks))
    return ks, [build_p1_backend(k, *grid) for k in ks]


def _hq_series(k_values, amplitude, profile, f_coeffs, grid=None):
    ks, frames = _family(k_values, grid)
    out = []
    for k, fr in zip(ks, frames):
        qz = Quantization(fr, sphere_metric(fr, amplitude, profile))
        f = legendre_profile(fr, f_coeffs)
        HQ = h_operator(qz.moment(), qz.q_hat(f))
        out.append((k, fr, qz, f, HQ - f))
    return out


# ---------------------------------------------------------------- H_k Q_k


def verify_hq(k_values, amplitude: float = 0.0, profile="mixed", f_coeffs=(0.0, 1.0), grid=None) -> ExpansionFit:
    """Decay of ``H_k Q_k f - f`` and its profile against ``-2 Delta f``.

    ``Q_k`` is normalized so that ``Q_k(1) = I``. Values are ``L^2(omega)`` norms of
    ``H_k Q_k f - f``; correlations compare ``k (H_k Q_k f - f)`` with ``-2 Delta f``.
    """
    if len(list(k_values)) < 4:
        raise ConfigError("verify_hq needs at least 4 k values")
    series = _hq_series(k_values, amplitude, profile, f_coeffs, grid)
    ks, vals, corrs, profs = [], [], [], {}
    for k, fr, qz, f, r in series:
        w = qz.kd.unit_measure
        q1 = -2.0 * calibrated_laplacian(qz.kd, f)
        ks.append(k)
        vals.append(float(np.sqrt(np.sum(r**2 * w))))
        corrs.append(_corr(k * r, q1, w))
        profs[k] = k * r
    if max(vals) < 1e-10:
        # constants are reproduced exactly; no decay to fit
        return ExpansionFit("hq", ks, vals, correlations=corrs, comparison="-2 Delta f",
                            extra={"exact": True}, profiles=profs)
    return _fit("hq", ks, vals, correlations=corrs, comparison="-2 Delta f", profiles=profs)


def hq_profiles(k_values=(12, 13, 14, 15, 16), amplitude: float = 0.1, profile="mixed", f_coeffs=(0.0, 1.0)):
    """Extrapolated first-order profile of ``H_k Q_k f - f`` and the raw level-one Laplacian of ``f``."""
    series = _hq_series(k_values, amplitude, profile, f_coeffs)
    ks = [s[0] for s in series]
    q1 = _extrapolate_leading(ks, [s[0] * s[4] for s in series])
    k, fr, qz, f, _ = series[-1]
    return q1, k * laplacian(qz.kd, f)


# ---------------------------------------------------------------- density expansion


def _tyz_series(k_values, amplitude, profile, grid=None):
    from .bergman import rho_tilde
    ks, frames = _family(k_values, grid)
    out = []
    for k, fr in zip(ks, frames):
        qz = Quantization(fr, sphere_metric(fr, amplitude, profile))
        rt = rho_tilde(fr, qz.h, quant=qz)
        S = fr.level_k * scalar_curvature(qz.kd)
        out.append((k, fr, qz, rt, S))
    return out


def verify_tyz(k_values, amplitude: float = 0.1, profile="mixed", grid=None) -> ExpansionFit:
    """Decay of ``rho_tilde_k - 1`` and the profile of ``k (rho_tilde_k - 1)`` against ``-S``.

    ``extra`` carries the per-``k`` regression constant ``-<a, S>/<S, S>`` (one if the
    curvature normalization is calibrated) and the spatial variation of ``k (rho_tilde - 1)``.
    """
    series = _tyz_series(k_values, amplitude, profile, grid)
    ks, vals, corrs, profs, consts, var = [], [], [], {}, [], []
    for k, fr, qz, rt, S in series:
        w = qz.kd.unit_measure
        a = k * (rt - 1.0)
        ks.append(k)
        vals.append(float(np.sqrt(np.sum((rt - 1.0) ** 2 * w) / np.sum(w))))
        corrs.append(_corr(a, -S, w))
        consts.append(float(-np.sum(a * S * w) / np.sum(S * S * w)))
        var.append(float(np.max(a) - np.min(a)))
        profs[k] = a
    extra = {"calibration_ratio": consts, "profile_variation": var}
    if len(ks) >= 2:
        a1 = _extrapolate_leading(ks, [profs[k] for k in ks])
        S, w = series[-1][4], series[-1][2].kd.unit_measure
        extra["extrapolated_ratio"] = float(-np.sum(a1 * S * w) / np.sum(S * S * w))
        extra["extrapolated_correlation"] = _corr(a1, -S, w)
        fit = _fit("tyz", ks, vals, correlations=corrs, comparison="-S", extra=extra, profiles=profs)
        return fit
    return ExpansionFit("tyz", ks, vals, correlations=corrs, comparison="-S", extra=extra, profiles=profs)


def tyz_profiles(k_values=(12, 13, 14, 15, 16), amplitude: float = 0.1, profile="mixed"):
    """Extrapolated ``a_1`` profile and the curvature of the level-one metric with unit constant."""
    series = _tyz_series(k_values, amplitude, profile)
    ks = [s[0] for s in series]
    a1 = _extrapolate_leading(ks, [s[0] * (s[3] - 1.0) for s in series])
    S = series[-1][4] / load_calibration()["gamma_S"]
    return a1, S


# ---------------------------------------------------------------- Hamiltonians and c_A


def rotation_hamiltonian(qz: Quantization, generator_index: int = 0) -> np.ndarray:
    """Normalized Hamiltonian ``H_X`` of the torus generator for the level-one metric of ``qz.h``.

    Starts from the round Hamiltonian ``-(k/2) cos(theta)`` of the centered weights and shifts
    it to the perturbed metric; the result has zero ``omega``-average.
    """
    fr = qz.frame
    wd = weight_blocks(fr)
    A = lie_rep(fr, wd, generator_index).A
    ref = fr.reference_kd
    z = fr.Z @ np.diag(np.sqrt(np.diag(fr.K_ref).real)).T
    zu = z / np.linalg.norm(z, axis=1)[:, None]
    H_round = np.einsum("pi,ij,pj->p", zu.conj(), A, zu).real
    u = qz.h.phi - fr.reference_potential
    Hk = H_round + gradient_pairing(ref, H_round, u)
    Hk = Hk - qz.kd.mean(Hk)
    return Hk / fr.level_k


def c_A_decay(k_values, amplitude: float = 0.1, profile="mixed", grid=None, sign: float = 1.0) -> ExpansionFit:
    """``|c_A(k)| / tr(A_k^2)^(1/2)`` with ``c_A(k) = (1/V) int H_k(A_k) omega``.

    ``A_k`` is the centered weight matrix of the rotation scaled by ``sign``; ``H_k`` uses the
    embedding by a ``Hilb_k(h)``-orthonormal basis of the fixed metric.
    """
    ks, frames = _family(k_values, grid)
    vals, cs = [], []
    for k, fr in zip(ks, frames):
        qz = Quantization(fr, sphere_metric(fr, amplitude, profile))
        A = sign * lie_rep(fr, weight_blocks(fr), 0).A
        HA = h_operator(qz.moment(), A)
        w = qz.kd.unit_measure
        c = float(np.sum(HA * w) / np.sum(w))
        cs.append(c)
        tr2 = frobenius(A, A)
        vals.append(abs(c) / math.sqrt(tr2) if tr2 > 0 else 0.0)
    extra = {"c_A": cs}
    if all(v > 0 for v in vals):
        return _fit("ca", ks, vals, comparison="", extra=extra)
    return ExpansionFit("ca", ks, vals, extra=extra)


def build_F_l(kd: KahlerData, H_X, l: int, k: int) -> np.ndarray:
    """Truncated solution ``F_0 = H_X`` or ``F_1 = H_X + (2/k) Delta H_X``."""
    if l not in (0, 1):
        if isinstance(l, int) and l >= 2:
            raise UnsupportedError("F_l for l >= 2 needs correction terms that are not available")
        raise ConfigError(f"l must be 0 or 1, got {l}")
    H_X = np.asarray(H_X, dtype=np.float64)
    if l == 0:
        return H_X.copy()
    return H_X + (2.0 / k) * calibrated_laplacian(kd, H_X)


def thm2_residual(k_values, l_values=(0, 1), amplitude: float = 0.1, profile="p1", grid=None,
                  generator_scale: float = 1.0) -> dict:
    """``tr((Q_k(F_l) - A/k - c_k I)^2)`` with the optimal ``c_k``, for each ``l``.

    Returns
    -------
    dict
        ``{l: ExpansionFit}``; each fit's ``extra`` has the optimal ``c_k`` and the residual
        with ``c_k = 0``.
    """
    ks, frames = _family(k_values, grid)
    raw = {l: [] for l in l_values}
    cks = {l: [] for l in l_values}
    zero_c = {l: [] for l in l_values}
    for k, fr in zip(ks, frames):
        qz = Quantization(fr, sphere_metric(fr, amplitude, profile))
        A = generator_scale * lie_rep(fr, weight_blocks(fr), 0).A
        HX = generator_scale * rotation_hamiltonian(qz)
        for l in l_values:
            D = qz.q_hat(build_F_l(qz.kd, HX, l, k)) - A / k
            c = float(np.trace(D).real / fr.dim)
            R = D - c * np.eye(fr.dim)
            raw[l].append(frobenius(R, R))
            cks[l].append(c)
            zero_c[l].append(frobenius(D, D))
    out = {}
    for l in l_values:
        extra = {"c_k": cks[l], "residual_c_zero": zero_c[l]}
        if all(v > 0 for v in raw[l]):
            out[l] = _fit(f"thm2_l{l}", ks, raw[l], extra=extra)
        else:
            out[l] = ExpansionFit(f"thm2_l{l}", ks, raw[l], extra=extra)
    return out


def equivariant_trace_check(k_values=range(2, 17), n_theta: int = 64, n_phi: int = 128) -> ExpansionFit:
    """``tr(A_k^2)`` of the rotation against ``k^3 gamma_V int H_X^2 omega`` on the sphere.

    ``gamma_V`` is estimated at each ``k`` by second-order Richardson extrapolation of
    ``tr(A_k^2)/(k^3 int H_X^2 omega)`` over ``k, k+1, k+2``.
    """
    ks = [int(k) for k in k_values]
    fr1 = build_p1_backend(1, n_theta, n_phi)
    HX = rotation_hamiltonian(Quantization(fr1, sphere_metric(fr1)))
    w = fr1.reference_kd.unit_measure
    int_hx2 = float(np.sum(HX**2 * w))
    tr2 = []
    for k in ks:
        weights = np.arange(k + 1) - k / 2.0
        tr2.append(float(np.sum(weights**2)))
    closed = [k * (k + 1) * (k + 2) / 12.0 for k in ks]

    def ratio(k):
        wts = np.arange(k + 1) - k / 2.0
        return float(np.sum(wts**2)) / (k**3 * int_hx2)

    rich = {}
    for k in ks:
        X = np.array([[1.0, 1.0 / j, 1.0 / j**2] for j in (k, k + 1, k + 2)])
        y = np.array([ratio(j) for j in (k, k + 1, k + 2)])
        rich[k] = float(np.linalg.solve(X, y)[0])
    vals = [t / k**3 for t, k in zip(tr2, ks)]
    gamma = load_calibration()["gamma_V"]
    extra = {"tr_A2": tr2, "closed_form": closed, "int_HX2": int_hx2, "raw_ratio": [ratio(k) for k in ks],
             "richardson_gamma_V": [rich[k] for k in ks], "gamma_V": rich[ks[-1]],
             "recorded_gamma_V": gamma, "limit_prediction": gamma * int_hx2}
    return ExpansionFit("eqrr", ks, vals, comparison="gamma_V int H_X^2 omega", extra=extra)


def cor51_residual(k_values, amplitude: float = 0.1, profile=(0.0, 1.0), grid=None) -> ExpansionFit:
    """``||mu_bar - B(k) - c(k) I||_op / c(k)`` at ``Hilb_k(h)`` with least-squares ``B, c``.

    ``B(k)`` ranges over ``V(T)`` and ``c(k)`` over multiples of the identity.
    """
    ks, frames = _family(k_values, grid)
    vals, raw, fro_fit, fro_raw = [], [], [], []
    for k, fr in zip(ks, frames):
        qz = Quantization(fr, sphere_metric(fr, amplitude, profile))
        md = qz.moment()
        wd = weight_blocks(fr)
        basis = [b.A for b in torus_basis(fr, wd)] + [np.eye(fr.dim, dtype=complex)]
        B_plus_c, R = project_VT(md.mu_bar, basis)
        vals.append(float(np.linalg.norm(R, 2) / md.c_value))
        raw.append(float(np.linalg.norm(md.M, 2) / md.c_value))
        fro_fit.append(float(np.linalg.norm(R) / md.c_value))
        fro_raw.append(float(np.linalg.norm(md.M) / md.c_value))
    # the fit is Frobenius-optimal; the reduction is guaranteed in that norm only
    extra = {"residual_without_fit": raw, "frobenius_fitted": fro_fit, "frobenius_without_fit": fro_raw}
    if all(v > 1e-14 for v in vals):
        return _fit("cor51", ks, vals, extra=extra)
    return ExpansionFit("cor51", ks, vals, extra=extra)


def moment_offset_decay(k_values, amplitude: float = 0.1, profile="mixed", grid=None) -> ExpansionFit:
    """``||M^(k)||_op / c_k`` for the traceless part of ``mu_bar`` at ``Hilb_k(h)``."""
    ks, frames = _family(k_values, grid)
    vals = []
    for k, fr in zip(ks, frames):
        md = Quantization(fr, sphere_metric(fr, amplitude, profile)).moment()
        vals.append(float(np.linalg.norm(md.M, 2) / md.c_value))
    if all(v > 0 for v in vals):
        return _fit("moment_offset", ks, vals)
    return ExpansionFit("moment_offset", ks, vals)


OBSERVABLES = ("hq", "tyz", "ca", "thm2", "eqrr", "cor51")


def run_observable(name: str, k_values, grid=None, amplitude: float | None = None) -> list:
    """Dispatch used by the command line; returns a list of fits."""
    ks = [int(k) for k in k_values]
    if name not in OBSERVABLES:
        raise ConfigError(f"unsupported observable {name!r}; choose from {', '.join(OBSERVABLES)}")
    if len(ks) < 2:
        raise ConfigError("a k range with at least two values is required")
    # the Laplacian check runs on the round metric by default, the others on a perturbation
    a = (0.0 if name == "hq" else 0.1) if amplitude is None else amplitude
    if name == "hq":
        return [verify_hq(ks, a, grid=grid)]
    if name == "tyz":
        return [verify_tyz(ks, a, grid=grid)]
    if name == "ca":
        return [c_A_decay(ks, a, grid=grid)]
    if name == "thm2":
        return list(thm2_residual(ks, amplitude=a, grid=grid).values())
    if name == "eqrr":
        return [equivariant_trace_check(ks)]
    return [cor51_residual(ks, a, grid=grid)]
