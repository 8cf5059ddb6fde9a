"""Command-line front end ``rbal``.

Every command is a pure function of its configuration: a JSON file given with ``--config``
whose values are overridden by individual flags. Artifacts are written atomically and carry
the seed. Exit codes: 0 success, 1 usage/config/validation error, 2 non-convergence.
"""
from __future__ import annotations

import csv
import io
import json
import os
import sys
import tempfile
from dataclasses import dataclass, field

import click
import numpy as np

from .errors import ConfigError, RbalError

EXIT_OK, EXIT_ERROR, EXIT_NONCONVERGED = 0, 1, 2

REPORTS = ("eig", "norm", "convexity", "destab", "distortion")
PRODUCT_GRID = (16, 32)

_SCHEMA = {
    "geometry": {"kind": str, "path": str, "grid": list, "k": int},
    "k": int,
    "k_range": list,
    "solver": {"mode": str, "tol": float, "max_iter": int, "seed": int},
    "torus": {"enabled": bool, "generators": list},
    "outputs": {"dir": str, "formats": list},
    "observable": str,
    "report": str,
    "amplitude": float,
    "samples": int,
    "input": str,
}


def _validate(doc, schema, where="config"):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    for key, val in doc.items():
        if key not in schema:
            raise ConfigError(f"unknown key '{key}' in {where}")
        spec = schema[key]
        if isinstance(spec, dict):
            _validate(val, spec, f"{where}.{key}")
        elif spec is float:
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{where}.{key} must be a number")
        elif spec is int:
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigError(f"{where}.{key} must be an integer")
        elif not isinstance(val, spec):
            raise ConfigError(f"{where}.{key} must be of type {spec.__name__}")


@dataclass
class RunConfig:
    """Validated run configuration (see the module docstring for precedence)."""

    geometry: str = "p1"
    geometry_path: str | None = None
    grid: tuple | None = None
    k: int | None = None
    k_range: list | None = None
    mode: str = "titer"
    tol: float = 1e-10
    max_iter: int = 2000
    seed: int = 0
    torus: bool = True
    out: str | None = None
    observable: str | None = None
    report: str | None = None
    amplitude: float | None = None
    samples: int | None = None
    input: str | None = None
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_sources(cls, config_path, flags: dict) -> "RunConfig":
        doc = {}
        if config_path:
            try:
                with open(config_path) as fh:
                    doc = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        _validate(doc, _SCHEMA)
        geo = doc.get("geometry", {})
        solver = doc.get("solver", {})
        cfg = cls(
            geometry=geo.get("kind", "p1"),
            geometry_path=geo.get("path"),
            grid=tuple(geo["grid"]) if "grid" in geo else None,
            k=doc.get("k", geo.get("k")),
            k_range=doc.get("k_range"),
            mode=solver.get("mode", "titer"),
            tol=float(solver.get("tol", 1e-10)),
            max_iter=int(solver.get("max_iter", 2000)),
            seed=int(solver.get("seed", 0)),
            torus=bool(doc.get("torus", {}).get("enabled", True)),
            out=doc.get("outputs", {}).get("dir"),
            observable=doc.get("observable"),
            report=doc.get("report"),
            amplitude=doc.get("amplitude"),
            samples=doc.get("samples"),
            input=doc.get("input"),
        )
        for key, val in flags.items():
            if val is None:
                continue
            if key == "geometry":
                kind, _, path = val.partition(":")
                cfg.geometry = kind
                if path:
                    cfg.geometry_path = path
            elif key == "grid":
                cfg.grid = _parse_grid(val)
            elif key == "k_range":
                cfg.k_range = _parse_range(val)
            elif key == "torus":
                cfg.torus = val == "on"
            else:
                setattr(cfg, key, val)
        if cfg.k_range is not None:
            if len(cfg.k_range) != 2 or cfg.k_range[0] > cfg.k_range[1] or cfg.k_range[0] < 1:
                raise ConfigError("k_range must be A:B with 1 <= A <= B")
        if cfg.geometry not in ("p1", "product", "file"):
            raise ConfigError(f"unknown geometry kind {cfg.geometry!r}")
        if cfg.geometry == "file" and not cfg.geometry_path:
            raise ConfigError("file geometry needs a path (--geometry file:PATH or geometry.path)")
        if cfg.grid is not None and (len(cfg.grid) != 2 or min(cfg.grid) < 1):
            raise ConfigError("grid must be NxM with positive N, M")
        cfg.raw = doc
        return cfg

    @property
    def k_values(self) -> list:
        if self.k_range is not None:
            return list(range(self.k_range[0], self.k_range[1] + 1))
        if self.k is not None:
            return [int(self.k)]
        if self.geometry == "file":
            return [None]  # level read from the file
        raise ConfigError("missing --k (or --k-range)")

    def to_dict(self) -> dict:
        return {"geometry": self.geometry, "geometry_path": self.geometry_path,
                "grid": list(self.grid) if self.grid else None, "k": self.k, "k_range": self.k_range,
                "mode": self.mode, "tol": self.tol, "max_iter": self.max_iter, "seed": self.seed,
                "torus": self.torus, "observable": self.observable, "report": self.report,
                "amplitude": self.amplitude, "samples": self.samples, "input": self.input}


def _parse_grid(text: str) -> tuple:
    try:
        a, b = text.lower().split("x")
        return int(a), int(b)
    except ValueError as exc:
        raise ConfigError(f"--grid must look like NxM, got {text!r}") from exc


def _parse_range(text: str) -> list:
    try:
        a, b = text.split(":")
        return [int(a), int(b)]
    except ValueError as exc:
        raise ConfigError(f"--k-range must look like A:B, got {text!r}") from exc


# ---------------------------------------------------------------- plumbing


def build_frame(cfg: RunConfig, k: int):
    """Section frame for the configured geometry at level ``k``."""
    from .geometry import build_p1_backend, build_product_backend, load_sampled_variety
    if cfg.geometry == "p1":
        nt, nph = cfg.grid if cfg.grid else (None, None)
        return build_p1_backend(k, nt, nph)
    if cfg.geometry == "product":
        nt, nph = cfg.grid if cfg.grid else PRODUCT_GRID
        f = build_p1_backend(k, nt, nph)
        return build_product_backend(f, f)
    frame = load_sampled_variety(cfg.geometry_path)
    if cfg.k is not None and int(cfg.k) != frame.level_k:
        raise ConfigError(f"--k {cfg.k} does not match the file's level {frame.level_k}")
    return frame


def _torus_data(cfg: RunConfig, frame):
    """Weight decomposition and ``V(T)`` basis; a single block and empty basis when disabled."""
    from .symmetry import WeightDecomposition, torus_basis, weight_blocks
    if cfg.torus:
        wd = weight_blocks(frame)
        return wd, torus_basis(frame, wd)
    d = frame.dim
    wd = WeightDecomposition(np.zeros((1, 0), dtype=np.int64), np.zeros((1, 0)), np.array([d]),
                             np.zeros(d, dtype=np.int64), np.zeros((d, 0)))
    return wd, []


def _write_text(path, text):
    path = os.path.abspath(path)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path), suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    _write_text(path, buf.getvalue())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        if np.iscomplexobj(obj):
            return np.stack([obj.real, obj.imag], axis=-1).tolist()
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _out_dir(cfg: RunConfig, default: str) -> str:
    return cfg.out or os.path.join("rbal-out", default)


def _start(cfg, frame, wd=None):
    from .balance import random_inner_product
    if cfg.input:
        from .bergman import load_inner_product
        ip = load_inner_product(cfg.input)
        if ip.H.shape[0] != frame.dim:
            raise ConfigError(f"input inner product has dimension {ip.H.shape[0]}, frame has {frame.dim}")
        return ip.H
    return random_inner_product(np.random.default_rng(cfg.seed), frame.dim, wd)


def _emit_solve(cfg, frame, report, out, with_B):
    from .bergman import atomic_write_json, save_inner_product
    extra = {"seed": cfg.seed, "provenance": f"rbal {report.mode} solve, status {report.status}"}
    save_inner_product(report.final, os.path.join(out, "H.json"), extra)
    doc = report.to_dict()
    doc.update({"seed": cfg.seed, "config": cfg.to_dict(), "level_k": frame.level_k, "dim": frame.dim})
    atomic_write_json(os.path.join(out, "report.json"), _jsonable(doc))
    _write_csv(os.path.join(out, "residuals.csv"),
               ["iteration", "balanced_residual", "relative_residual"], report.residual_history)
    if with_B:
        B = report.B_matrix
        atomic_write_json(os.path.join(out, "B_matrix.json"),
                          {"level_k": frame.level_k, "dim": frame.dim, "seed": cfg.seed,
                           "entries": np.stack([B.real, B.imag], axis=-1).tolist()})
    return EXIT_OK if report.converged else EXIT_NONCONVERGED


def _solve_at(cfg, frame, wd=None, basis=()):
    from .balance import SolveOptions, solve_balanced
    return solve_balanced(frame, _start(cfg, frame), SolveOptions(cfg.tol, cfg.max_iter, cfg.mode), wd, basis)


# ---------------------------------------------------------------- commands


def cmd_balance(cfg: RunConfig) -> int:
    ks = cfg.k_values
    if len(ks) != 1:
        raise ConfigError("balance runs at a single --k")
    frame = build_frame(cfg, ks[0])
    wd, basis = (None, ())
    if cfg.torus and frame.weight_tags is not None:
        wd, basis = _torus_data(cfg, frame)
    report = _solve_at(cfg, frame, wd, basis)
    code = _emit_solve(cfg, frame, report, _out_dir(cfg, f"balance-k{frame.level_k}"), with_B=False)
    click.echo(f"{report.status}: {report.iterates} iterations, residual "
               f"{report.residual_history[-1][1] if report.residual_history else float('nan'):.3e}")
    return code


def cmd_relative(cfg: RunConfig) -> int:
    from .balance import SolveOptions, solve_relative
    ks = cfg.k_values
    if len(ks) != 1:
        raise ConfigError("relative runs at a single --k")
    frame = build_frame(cfg, ks[0])
    wd, basis = _torus_data(cfg, frame)
    H0 = _start(cfg, frame, wd)
    report = solve_relative(frame, H0, wd, basis, SolveOptions(cfg.tol, cfg.max_iter, "descent"))
    code = _emit_solve(cfg, frame, report, _out_dir(cfg, f"relative-k{frame.level_k}"), with_B=True)
    last = report.residual_history[-1][2] if report.residual_history else float("nan")
    click.echo(f"{report.status}: {report.iterates} iterations, relative residual {last:.3e}")
    return code


def cmd_expansion(cfg: RunConfig) -> int:
    from .expansion import OBSERVABLES, run_observable
    name = cfg.observable
    if name not in OBSERVABLES:
        raise ConfigError(f"unsupported observable {name!r}; choose from {', '.join(OBSERVABLES)}")
    if cfg.geometry != "p1":
        raise ConfigError("expansion observables are defined on the p1 geometry")
    ks = cfg.k_values
    if len(ks) < 2:
        raise ConfigError("a fit needs a k range with at least two values")
    fits = run_observable(name, ks, grid=cfg.grid, amplitude=cfg.amplitude)
    out = _out_dir(cfg, f"expansion-{name}")
    for i, fit in enumerate(fits):
        target = out if len(fits) == 1 else os.path.join(out, f"l{i}")
        fit.save(target, seed=cfg.seed)
        click.echo(f"{fit.observable}: exponent {fit.exponent:.4f} +- {fit.exponent_stderr:.4f}")
    return EXIT_OK


def cmd_stability(cfg: RunConfig) -> int:
    from .bergman import atomic_write_json
    from .stability import (convexity_report, destabilizer_scan, distortion_report,
                            eigenvalue_bound_report, norm_bound_report)
    if cfg.report not in REPORTS:
        raise ConfigError(f"unsupported report {cfg.report!r}; choose from {', '.join(REPORTS)}")
    ks = cfg.k_values
    out = _out_dir(cfg, f"stability-{cfg.report}")
    summaries, rows = [], []
    code = EXIT_OK
    for k in ks:
        frame = build_frame(cfg, k)
        if cfg.input:
            from .bergman import load_inner_product
            H = load_inner_product(cfg.input).H
            solve_status = "input"
        else:
            rep = _solve_at(cfg, frame)
            H, solve_status = rep.final.H, rep.status
            if not rep.converged:
                code = EXIT_NONCONVERGED
        samples = cfg.samples
        if cfg.report == "eig":
            wd, basis = _torus_data(cfg, frame)
            s = eigenvalue_bound_report(frame, H, wd, basis, samples or 50, cfg.seed)
            rows += s.pop("rows")
        elif cfg.report == "norm":
            s = norm_bound_report(frame, H, samples or 50, cfg.seed)
            rows += s.pop("rows")
        elif cfg.report == "convexity":
            s = convexity_report(frame, H, samples or 20, seed=cfg.seed)
            rows += [(r[0], r[1], r[3], r[2]) for r in s.pop("rows")]
        elif cfg.report == "distortion":
            s = distortion_report(frame, H, frame.reference_kd)
        else:
            wd, basis = _torus_data(cfg, frame)
            d = destabilizer_scan(frame, H, wd, basis, seed=cfg.seed)
            s = {"k": k, "destabilizer": "none"} if d is None else {
                "k": k, "destabilizer": d.source, "slope": d.slope, "tr_A2": d.tr_A2,
                "fit_residual": d.fit_residual, "certified": d.certified, "A": d.A}
        s["solve_status"] = solve_status
        summaries.append(s)
    if cfg.report in ("eig", "norm"):
        _write_csv(os.path.join(out, "report.csv"), ["k", "sample_id", "ratio"], rows)
    elif cfg.report == "convexity":
        _write_csv(os.path.join(out, "report.csv"), ["k", "sample_id", "ratio", "t"], rows)
    atomic_write_json(os.path.join(out, "report.json"),
                      _jsonable({"report": cfg.report, "seed": cfg.seed, "config": cfg.to_dict(),
                                 "per_k": summaries}))
    click.echo(f"{cfg.report} report for {len(summaries)} level(s) written to {out}")
    return code


def cmd_export_frame(cfg: RunConfig) -> int:
    from .geometry import save_sampled_variety
    ks = cfg.k_values
    if len(ks) != 1:
        raise ConfigError("export-frame runs at a single --k")
    frame = build_frame(cfg, ks[0])
    out = _out_dir(cfg, f"frame-k{frame.level_k}")
    os.makedirs(out, exist_ok=True)
    save_sampled_variety(frame, os.path.join(out, "frame.json"))
    click.echo(f"frame with {frame.n_points} points written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- click wiring


def _common(f):
    opts = [
        click.option("--config", "config_path", type=click.Path(), help="JSON run configuration."),
        click.option("--geometry", help="p1, product or file:PATH."),
        click.option("--k", "k", type=int, help="Level k."),
        click.option("--k-range", "k_range", help="Inclusive range A:B."),
        click.option("--grid", help="Resolution NxM (theta x phi, per factor)."),
        click.option("--tol", type=float, help="Solver tolerance."),
        click.option("--max-iter", "max_iter", type=int, help="Solver iteration cap."),
        click.option("--seed", type=int, help="Master seed."),
        click.option("--torus", type=click.Choice(["on", "off"]), help="Use the torus action."),
        click.option("--out", help="Output directory."),
        click.option("--mode", type=click.Choice(["titer", "descent"]), help="Balanced solver mode."),
        click.option("--input", "input", type=click.Path(), help="Inner product JSON to start from."),
        click.option("--amplitude", type=float, help="Perturbation amplitude (expansion)."),
        click.option("--samples", type=int, help="Random samples (stability)."),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


def _run(command, config_path, **flags):
    cfg = RunConfig.from_sources(config_path, flags)
    return command(cfg)


@click.group()
def cli():
    """Balanced and relatively balanced embeddings: solvers, expansions, diagnostics."""


@cli.command()
@_common
def balance(config_path, **flags):
    """Solve for a balanced inner product."""
    return _run(cmd_balance, config_path, **flags)


@cli.command()
@_common
def relative(config_path, **flags):
    """Solve for a relatively balanced inner product."""
    return _run(cmd_relative, config_path, **flags)


@cli.command()
@click.argument("observable", required=False)
@_common
def expansion(observable, config_path, **flags):
    """Fit one asymptotic observable: hq, tyz, ca, thm2, eqrr or cor51."""
    return _run(cmd_expansion, config_path, observable=observable, **flags)


@cli.command()
@click.argument("report", required=False)
@_common
def stability(report, config_path, **flags):
    """Stability report: eig, norm, convexity, destab or distortion."""
    return _run(cmd_stability, config_path, report=report, **flags)


@cli.command("export-frame")
@_common
def export_frame(config_path, **flags):
    """Write the geometry's section frame in the sampled variety format."""
    return _run(cmd_export_frame, config_path, **flags)


def main(argv=None) -> int:
    """Entry point; returns (and exits with) the documented exit code."""
    try:
        code = cli.main(args=argv, prog_name="rbal", standalone_mode=False)
    except click.exceptions.NoArgsIsHelpError as exc:
        click.echo(exc.ctx.get_help() if exc.ctx else str(exc), err=True)
        code = EXIT_ERROR
    except click.ClickException as exc:
        exc.show()
        code = EXIT_ERROR
    except click.exceptions.Abort:
        code = EXIT_ERROR
    except RbalError as exc:
        click.echo(f"error: {exc}", err=True)
        if isinstance(exc, ConfigError):
            click.echo("usage: rbal COMMAND [OPTIONS]; see rbal COMMAND --help", err=True)
        code = EXIT_ERROR
    code = EXIT_OK if code is None else int(code)
    if argv is None:
        sys.exit(code)
    return code


if __name__ == "__main__":
    main()
