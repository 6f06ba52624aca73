"""Command-line entry point: ``vck <subcommand> <config-file>``.

The configuration is a line-oriented ``key = value`` file; ``#`` starts a
comment.  Every run writes its tables, plot data, figures, a run log and a
``manifest.json`` into ``out_dir`` (overridden by the VCK_OUT_DIR
environment variable).  Failures leave an ``error.json`` and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import platform
import sys
import time
import traceback
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import report
from .grid import Grid, build_grid, firing_rate, l1_distance, restrict
from .model import ModelParams, WeakConnectivityWarning, WeightSpec

SUBCOMMANDS = ("evolve", "steady", "stability", "smoothing", "harnack", "harris", "particle", "sweep")
MAX_SNAPSHOTS = 200


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    v_F: float = 1.0
    v_E: float = 2.0
    y_L: float = 1.0
    a_star: float = 1.0
    y_star: float = 1.0
    c: float = 0.0
    n_v: int = 64
    n_y: int = 128
    y_max: float = 8.0
    dt: float | None = None
    t_end: float = 1.0
    scheme: str = "imex"
    cfl_safety: float = 0.5
    weight_kind: str = "polynomial"
    weight_k: float = 2.0
    weight_alpha: float = 1.0
    twist: bool = False
    seed: int = 0
    n_neurons: int = 100000
    harris_T: float = 2.0
    harris_eps_ladder: tuple = (0.2, 0.1, 0.05)
    out_dir: str = "vck_out"

    @property
    def params(self) -> ModelParams:
        return ModelParams(self.v_F, self.v_E, self.y_L, self.a_star, self.y_star, self.c)

    @property
    def weight(self) -> WeightSpec:
        return WeightSpec(self.weight_kind, self.weight_k, self.weight_alpha, self.twist)

    def grid(self, quiet: bool = True) -> Grid:
        with warnings.catch_warnings():
            if quiet:
                warnings.simplefilter("ignore")
            return build_grid(self.params, self.n_v, self.n_y, self.y_max)

    def evolve_config(self, **kw):
        from .evolve import EvolveConfig

        return EvolveConfig(dt=self.dt, t_end=self.t_end, scheme=self.scheme, cfl_safety=self.cfl_safety, **kw)

    def resolved_out_dir(self) -> Path:
        return Path(os.environ.get("VCK_OUT_DIR") or self.out_dir)


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _convert(name: str, raw: str):
    f = RunConfig.__dataclass_fields__[name]
    default = f.default
    if name == "dt":
        return None if raw.lower() in ("none", "auto", "") else float(raw)
    if name == "harris_eps_ladder":
        vals = tuple(float(s) for s in raw.replace(" ", "").split(",") if s)
        if not vals:
            raise ValueError("empty list")
        return vals
    if isinstance(default, bool):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        x = float(raw)
        if x != int(x):
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(x)
    if isinstance(default, float):
        return float(raw)
    return raw


def validate(cfg: RunConfig) -> RunConfig:
    """Check every invariant eagerly; errors name the offending key."""
    try:
        p = cfg.params
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.n_v < 4:
        raise ConfigError("n_v: requires n_v >= 4")
    if cfg.n_y < 4:
        raise ConfigError("n_y: requires n_y >= 4")
    if not cfg.y_max > 2.0 * p.y_F:
        raise ConfigError(f"y_max: requires y_max > 2 y_F = {2.0 * p.y_F:.6g}")
    try:
        cfg.evolve_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        WeightSpec(cfg.weight_kind, cfg.weight_k, cfg.weight_alpha, cfg.twist)
    except ValueError as exc:
        raise ConfigError(f"weight_kind/weight_k/weight_alpha: {exc}") from exc
    if cfg.seed < 0:
        raise ConfigError("seed: requires seed >= 0")
    if cfg.n_neurons < 1:
        raise ConfigError("n_neurons: requires n_neurons >= 1")
    if not cfg.harris_T > 0:
        raise ConfigError("harris_T: requires harris_T > 0")
    if any(not 0 < e < 0.5 * cfg.v_F for e in cfg.harris_eps_ladder):
        raise ConfigError("harris_eps_ladder: requires 0 < eps < v_F / 2")
    if not p.weakly_connected:
        warnings.warn(
            f"c = {p.c:.6g} >= v_F / v_E = {p.v_F / p.v_E:.6g}: outside the weak-connectivity regime",
            WeakConnectivityWarning,
            stacklevel=2,
        )
    return cfg


def parse_config_text(text: str) -> RunConfig:
    values = {}
    known = {f.name for f in fields(RunConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _convert(key, raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return validate(RunConfig(**values))


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())


def serialize(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if v is None:
            s = "none"
        elif isinstance(v, tuple):
            s = ", ".join(report.fmt(float(x)) for x in v)
        else:
            s = report.fmt(v)
        lines.append(f"{f.name} = {s}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------- pipelines


def _run_evolve(cfg: RunConfig, out: Path) -> list:
    from .analysis import random_smooth_density, weight_field
    from .evolve import run_nonlinear

    g, p = cfg.grid(), cfg.params
    F0 = random_smooth_density(g, np.random.default_rng(cfg.seed))
    _, n = cfg.evolve_config().step_plan(g, p)
    traj, _ = run_nonlinear(g, p, F0, cfg.evolve_config(snapshot_every=max(1, n // MAX_SNAPSHOTS)))
    wf = weight_field(g, cfg.weight, math.inf, p)
    rates = [firing_rate(g, p, s) for s in traj.states]
    linf = [float(np.abs(s * wf).max()) for s in traj.states]
    rows = zip(traj.times, traj.masses, rates, linf)
    files = [
        report.write_csv(out / "evolve_timeseries.csv", ["t", "mass", "firing_rate", "Linf_w"], rows),
        report.write_field(out / "final_state.csv", traj.final),
        report.write_dat(out / "firing_rate.dat", traj.times, rates, "t firing_rate"),
        report.write_dat(out / "mass.dat", traj.times, traj.masses, "t mass"),
        report.plot_curve(out / "firing_rate.png", traj.times, rates, "t", "firing rate"),
        report.plot_field(out / "final_state.png", traj.final, f"t = {traj.times[-1]:.4g}"),
    ]
    return files


def _run_steady(cfg: RunConfig, out: Path) -> list:
    from .stationary import fixed_point_steady

    g, p = cfg.grid(), cfg.params
    fp = fixed_point_steady(g, p)
    M = fp.density
    ym = M.values.sum(axis=0) * g.dv
    files = [
        report.write_field(out / "steady_state.csv", M),
        report.write_csv(out / "fixedpoint_log.csv", ["iteration", "N", "gap"], fp.log),
        report.write_csv(
            out / "steady_summary.csv",
            ["N", "iterations", "converged", "residual", "top_mass"],
            [(fp.N, fp.iterations, fp.converged, M.meta["residual"], M.meta["top_mass"])],
        ),
        report.write_dat(out / "steady_y_marginal.dat", g.y, ym, "y marginal"),
        report.plot_field(out / "steady_state.png", M, f"N = {fp.N:.6g}"),
    ]
    return files


def _run_stability(cfg: RunConfig, out: Path) -> list:
    from .analysis import stability_study

    g, p = cfg.grid(), cfg.params
    rep = stability_study(g, p, t_end=cfg.t_end, seed=cfg.seed, dt=cfg.dt)
    fit = rep.fit
    gap = math.nan if rep.gap is None else rep.gap
    rel = math.nan if rep.relative_error is None else rep.relative_error
    return [
        report.write_csv(out / "stability_decay.csv", ["t", "L1_distance"], zip(fit.times, fit.norms)),
        report.write_csv(
            out / "stability_summary.csv",
            ["N", "rate", "prefactor", "r2", "eigen_gap", "relative_error"],
            [(rep.N, fit.rate, fit.prefactor, fit.r2, gap, rel)],
        ),
        report.write_dat(out / "decay.dat", fit.times, fit.norms, "t ||F_t - M||_L1"),
        report.plot_curve(out / "decay.png", fit.times, fit.norms, "t", "||F_t - M||", logy=True),
    ]


def _run_smoothing(cfg: RunConfig, out: Path) -> list:
    from .analysis import single_cell_density, smoothing_curve

    g, p = cfg.grid(), cfg.params
    cell = (g.n_v // 2, int(min(np.searchsorted(g.y, p.y_star), g.n_y - 1)))
    w = WeightSpec(kind="exponential", alpha=cfg.weight_alpha)
    t_first = max(1e-3, 2.0 * (cfg.dt or 0.0))
    times = np.geomspace(t_first, max(cfg.t_end, 10 * t_first), 60)
    sc = smoothing_curve(g, p, single_cell_density(g, cell), times, w, dt=cfg.dt)
    return [
        report.write_csv(out / "smoothing.csv", ["t", "ratio_Linf_w_over_L1_w"], zip(sc.times, sc.ratios)),
        report.write_csv(
            out / "smoothing_summary.csv",
            ["nu", "r2", "ceiling", "window_start", "window_stop"],
            [(sc.nu, sc.r2, sc.ceiling, sc.window[0], sc.window[1])],
        ),
        report.write_dat(out / "smoothing.dat", sc.times, sc.ratios, "t ratio"),
        report.plot_curve(out / "smoothing.png", sc.times, sc.ratios, "t", "Linf_w / L1_w", True, True),
    ]


def _run_harnack(cfg: RunConfig, out: Path) -> list:
    from .analysis import harnack_ratio, sample_evolution, single_cell_density
    from .evolve import Trajectory

    g, p = cfg.grid(), cfg.params
    cell = (g.n_v // 2, int(min(np.searchsorted(g.y, p.y_star), g.n_y - 1)))
    T0 = 0.5 * cfg.t_end
    Ts = T0 * np.array([1.5, 2.0, 3.0, 4.0])
    times = np.concatenate([[0.0, T0], Ts])
    states = sample_evolution(g, p, 0.0, single_cell_density(g, cell), times, cfg.dt)
    traj = Trajectory(g, times, states)
    rows = []
    for eps in cfg.harris_eps_ladder:
        if not g.eps_region(eps).any():
            continue
        for T in Ts:
            h = harnack_ratio(traj, eps, T0, T)
            rows.append((eps, T0, T, h.sup, h.inf, h.ratio, len(h.offending)))
    eps0 = rows[0][0] if rows else math.nan
    sel = [r for r in rows if r[0] == eps0]
    return [
        report.write_csv(out / "harnack.csv", ["eps", "T0", "T", "sup", "inf", "ratio", "n_offending"], rows),
        report.write_dat(out / "harnack.dat", [r[2] for r in sel], [r[5] for r in sel], f"T ratio (eps = {eps0})"),
    ]


def _run_harris(cfg: RunConfig, out: Path) -> list:
    from .harris import certify_vck, validate_certificate
    from .stationary import fixed_point_steady

    g, p = cfg.grid(), cfg.params
    N = fixed_point_steady(g, p).N
    sg, cert = certify_vck(g, p, N, cfg.harris_T, cfg.harris_eps_ladder, cfg.weight.twisted())
    val = validate_certificate(sg, cert, trials=100, n_max=50, seed=cfg.seed)
    cert_path = out / "harris_certificate.txt"
    cert.dump(cert_path)
    with open(cert_path, "a") as fh:
        fh.write(f"N = {report.fmt(N)}\nvalidation_passed = {report.fmt(val.passed)}\n")
        fh.write(f"worst_margin = {report.fmt(val.worst_margin)}\n")
    val_path = out / "harris_validation.csv"
    val.write_csv(val_path)
    n_max = max(r[1] for r in val.rows)
    worst = [min(r[4] / r[3] for r in val.rows if r[1] == n) for n in range(1, n_max + 1)]
    files = [
        cert_path,
        val_path,
        report.write_dat(out / "harris_margins.dat", range(1, n_max + 1), worst, "n worst_relative_margin"),
        report.plot_curve(out / "harris_margins.png", range(1, n_max + 1), worst, "n", "worst relative margin"),
    ]
    if not val.passed:
        raise RuntimeError(f"certificate validation failed (worst relative margin {val.worst_margin:.3g})")
    return files


def _largest_divisor_at_most(n: int, cap: int) -> int:
    return max(d for d in range(1, min(n, cap) + 1) if n % d == 0)


def _run_particle(cfg: RunConfig, out: Path) -> list:
    from .particle import empirical_density, simulate_network
    from .stationary import fixed_point_steady

    g, p = cfg.grid(), cfg.params
    coarse = Grid(
        _largest_divisor_at_most(g.n_v, 32), _largest_divisor_at_most(g.n_y, 32), g.y_max, g.v_F, g.y_F
    )
    window = (0.5 * cfg.t_end, cfg.t_end)
    dt = cfg.dt if cfg.dt is not None else 1e-3
    res = simulate_network(p, cfg.n_neurons, dt, cfg.t_end, cfg.seed, density_grid=coarse, window=window)
    D = empirical_density(res)
    fp = fixed_point_steady(g, p)
    Mc = restrict(fp.density, coarse)
    rate = res.firing_rate(window)
    l1 = l1_distance(D, Mc)
    res.write_spike_log(out / "spikes.csv")
    return [
        out / "spikes.csv",
        report.write_field(out / "particle_density.csv", D),
        report.write_csv(
            out / "particle_summary.csv",
            ["rate", "rate_se", "pde_rate", "relative_error", "L1_density", "n_spikes"],
            [(rate, res.rate_standard_error(window), fp.N, abs(rate - fp.N) / fp.N, l1, res.n_spikes)],
        ),
        report.write_dat(out / "particle_y_marginal.dat", coarse.y, D.values.sum(axis=0) * coarse.dv, "y marginal"),
        report.plot_field(out / "particle_density.png", D, f"n = {cfg.n_neurons}, rate = {rate:.4g}"),
    ]


def _sweep_point(cfg: RunConfig):
    from .stationary import fixed_point_steady

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fp = fixed_point_steady(cfg.grid(), cfg.params)
    return cfg.c, fp.N, fp.iterations, fp.converged, fp.residual


def _run_sweep(cfg: RunConfig, out: Path, workers: int | None = None) -> list:
    c_max = cfg.c if cfg.c > 0 else 0.1
    cfgs = [dataclasses.replace(cfg, c=float(c)) for c in np.linspace(0.0, c_max, 5)]
    workers = workers or os.cpu_count() or 1
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_sweep_point, cfgs))
    else:
        rows = [_sweep_point(c) for c in cfgs]
    return [
        report.write_csv(out / "sweep.csv", ["c", "N", "iterations", "converged", "gap"], rows),
        report.write_dat(out / "sweep.dat", [r[0] for r in rows], [r[1] for r in rows], "c N"),
        report.plot_curve(out / "sweep.png", [r[0] for r in rows], [r[1] for r in rows], "c", "steady firing rate"),
    ]


PIPELINES = {
    "evolve": _run_evolve,
    "steady": _run_steady,
    "stability": _run_stability,
    "smoothing": _run_smoothing,
    "harnack": _run_harnack,
    "harris": _run_harris,
    "particle": _run_particle,
    "sweep": _run_sweep,
}


def _versions() -> dict:
    import scipy

    from . import __version__

    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__, "vck": __version__}


def run(subcommand: str, cfg: RunConfig) -> int:
    """Execute one pipeline; returns the process exit status."""
    if subcommand not in PIPELINES:
        raise ConfigError(f"unknown subcommand {subcommand!r}; choose from {', '.join(SUBCOMMANDS)}")
    out = cfg.resolved_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    text = serialize(cfg)
    (out / "config.txt").write_text(text)
    status, files, error = 0, [], None
    start = time.time()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            validate(cfg)
            files = PIPELINES[subcommand](cfg, out)
        except Exception as exc:  # any module failure becomes a structured record
            status = 1
            error = {"type": type(exc).__name__, "message": str(exc), "subcommand": subcommand}
            (out / "error.json").write_text(json.dumps(error, indent=2) + "\n")
            (out / "traceback.txt").write_text(traceback.format_exc())
    with open(out / "run.log", "w") as fh:
        fh.write(f"subcommand = {subcommand}\nstatus = {status}\nelapsed_s = {time.time() - start:.3f}\n")
        seen: dict[str, int] = {}
        for w in caught:
            key = f"{w.category.__name__}: {w.message}"
            seen[key] = seen.get(key, 0) + 1
        for key, count in seen.items():
            fh.write(f"warning: {key}" + (f" (x{count})" if count > 1 else "") + "\n")
        if error:
            fh.write(f"error: {error['type']}: {error['message']}\n")
    listed = sorted({Path(f).name for f in files} | {"config.txt", "run.log"} | ({"error.json"} if error else set()))
    manifest = {
        "subcommand": subcommand,
        "status": status,
        "inputs_sha256": hashlib.sha256(text.encode()).hexdigest(),
        "seed": cfg.seed,
        "versions": _versions(),
        "files": listed,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return status


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="vck", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("config", help="key = value configuration file")
    args = ap.parse_args(argv)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            cfg = parse_config(args.config)
    except ConfigError as exc:
        print(f"vck: configuration error: {exc}", file=sys.stderr)
        return 2
    for w in caught:
        print(f"vck: warning: {w.message}", file=sys.stderr)
    status = run(args.subcommand, cfg)
    out = cfg.resolved_out_dir()
    if status:
        err = json.loads((out / "error.json").read_text())
        print(f"vck: {args.subcommand} failed: {err['type']}: {err['message']}", file=sys.stderr)
    else:
        print(f"vck: {args.subcommand} finished; artifacts in {out}")
    return status


if __name__ == "__main__":
    sys.exit(main())
