"""Command-line interface: ``stnngp {fit,predict,validate,simulate,dic,summary}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace


from . import __version__

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("stnngp")


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config


@dataclass
class PathsConfig:
    data: str | None = None
    out: str = "out"
    archive: str | None = None
    grid: str | None = None


@dataclass
class ModelConfig:
    tier: int = 3
    m: int = 10
    space_weight: float = 2.0 / 30.0
    period: float = 1.0


@dataclass
class SamplerSection:
    iterations: int = 100_000
    burn_in: int = 70_000
    thin: int = 12
    seed: int = 0
    adapt_every: int = 50
    target_accept: float = 0.3
    threads: int = 1


@dataclass
class PredictionConfig:
    start_year: int | None = None
    start_month: int = 1
    months: int = 12
    draws: int | None = None
    seed: int = 0
    outputs: str = "both"


@dataclass
class ValidationConfig:
    fraction: float = 0.10
    tier: int = 5
    seed: int = 0


@dataclass
class SimulationConfig:
    sites: int = 20
    months: int = 36
    start_year: int = 2000
    extent_km: float = 40.0
    regions: int = 3
    range_shift: float = 4.0
    seed: int = 0
    params: str | None = None   # JSON file with a parameter vector keyed by column name
    layout: str = "random"      # "random" (bands in easting) or "demo" (two-level hierarchy)
    missing_fraction: float = 0.0


SECTIONS = {"paths": PathsConfig, "model": ModelConfig, "sampler": SamplerSection, "prediction": PredictionConfig,
            "validation": ValidationConfig, "simulation": SimulationConfig}


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    priors: dict = field(default_factory=dict)
    prediction: PredictionConfig = field(default_factory=PredictionConfig)
    validation: ValidationConfig = field(default_factory=ValidationConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)

    def to_dict(self):
        out = asdict(self)
        out["priors"] = asdict(self.priors_obj())
        return out

    def priors_obj(self):
        from .inference import Priors
        try:
            return Priors(**self.priors)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[priors]: {exc}") from None

    def sampler_config(self):
        from .inference import SamplerConfig
        s, m = self.sampler, self.model
        try:
            return SamplerConfig(iterations=s.iterations, burn_in=s.burn_in, thin=s.thin, m=m.m, tier=m.tier,
                                 seed=s.seed, space_weight=m.space_weight, period=m.period,
                                 adapt_every=s.adapt_every, target_accept=s.target_accept, threads=s.threads)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def _coerce(cls, name, values):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"[{name}]: unknown keys {', '.join(unknown)}")
    out = {}
    for k, v in values.items():
        default = getattr(cls(), k)
        if v is None or default is None or isinstance(v, str) and isinstance(default, str):
            out[k] = v
        elif isinstance(default, bool) or isinstance(v, bool):
            raise ConfigError(f"[{name}] {k}: booleans are not accepted")
        elif isinstance(default, int):
            if not (isinstance(v, int) or isinstance(v, float) and float(v).is_integer()):
                raise ConfigError(f"[{name}] {k}: expected an integer, got {v!r}")
            out[k] = int(v)
        elif isinstance(default, float):
            if not isinstance(v, (int, float)):
                raise ConfigError(f"[{name}] {k}: expected a number, got {v!r}")
            out[k] = float(v)
        else:
            out[k] = v
    return cls(**out)


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a table of sections")
    unknown = sorted(set(raw) - set(SECTIONS) - {"priors"})
    if unknown:
        raise ConfigError(f"unknown sections: {', '.join(unknown)}")
    kw = {}
    for name, cls in SECTIONS.items():
        sec = raw.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"[{name}] must be a table")
        kw[name] = _coerce(cls, name, sec)
    cfg = RunConfig(priors=dict(raw.get("priors", {})), **kw)
    cfg.priors_obj()  # validates keys and values
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if str(path).endswith(".json"):
        try:
            raw = json.loads(blob)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    else:
        import tomli
        try:
            raw = tomli.loads(blob.decode("utf-8"))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    cfg = config_from_dict(raw)
    base = os.path.dirname(os.path.abspath(path))
    for key in ("data", "grid"):
        v = getattr(cfg.paths, key)
        if v is not None and not os.path.isabs(v):
            setattr(cfg.paths, key, os.path.join(base, v))
    return cfg


# flag -> (section, key)
OVERRIDES = {
    "data": ("paths", "data"), "out": ("paths", "out"), "archive": ("paths", "archive"), "grid": ("paths", "grid"),
    "tier": ("model", "tier"), "m": ("model", "m"), "space_weight": ("model", "space_weight"),
    "iterations": ("sampler", "iterations"), "burn_in": ("sampler", "burn_in"), "thin": ("sampler", "thin"),
    "seed": ("sampler", "seed"), "threads": ("sampler", "threads"),
    "start_year": ("prediction", "start_year"), "start_month": ("prediction", "start_month"),
    "months": ("prediction", "months"), "draws": ("prediction", "draws"),
    "fraction": ("validation", "fraction"), "split_tier": ("validation", "tier"),
    "sites": ("simulation", "sites"), "sim_months": ("simulation", "months"), "params": ("simulation", "params"),
}


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    for flag, (sec, key) in OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg, sec, replace(getattr(cfg, sec), **{key: v}))
    return cfg


def write_manifest(out_dir, command, cfg: RunConfig, extra=None):
    os.makedirs(out_dir, exist_ok=True)
    man = {"command": command, "code_version": __version__, "config": cfg.to_dict()}
    man.update(extra or {})
    path = os.path.join(out_dir, f"{command}_manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ------------------------------------------------------------------ commands


def _need(value, what):
    if value is None:
        raise ConfigError(f"{what} is required (flag or config)")
    return value


def _load_data(path):
    from .model import Dataset
    return Dataset.read_csv(_need(path, "data path"))


def _set_threads(n):
    import numba
    n = max(1, int(n))
    if n > numba.config.NUMBA_NUM_THREADS:
        raise ConfigError(f"--threads {n} exceeds the thread pool size {numba.config.NUMBA_NUM_THREADS}; "
                          "set NUMBA_NUM_THREADS before starting")
    numba.set_num_threads(n)


def write_convergence(archive, path):
    from .inference import convergence_table
    from .predict import write_table
    rows = convergence_table(archive)
    cols = ("parameter", "mean", "sd", "q025", "q975", "ess")
    write_table(path, cols, [[r[c] for c in cols] for r in rows])
    return path


def cmd_fit(cfg: RunConfig, resume=None, checkpoint=None):
    from .inference import run_chain
    data = _load_data(cfg.paths.data)
    sc = cfg.sampler_config()
    _set_threads(sc.threads)
    out = cfg.paths.archive or os.path.join(cfg.paths.out, "archive")
    os.makedirs(cfg.paths.out, exist_ok=True)
    t0 = time.perf_counter()
    archive = run_chain(data, sc, cfg.priors_obj(), checkpoint=checkpoint or os.path.join(cfg.paths.out,
                                                                                       "checkpoint.pkl"),
                        resume=resume)
    archive.manifest["data_path"] = os.path.abspath(cfg.paths.data)
    archive.save(out)
    write_convergence(archive, os.path.join(out, "convergence.csv"))
    write_manifest(cfg.paths.out, "fit", cfg, {"archive": out, "seconds": round(time.perf_counter() - t0, 3)})
    print(f"fit: {len(archive)} draws written to {out}")
    return archive


def cmd_predict(cfg: RunConfig):
    from .inference import PosteriorArchive
    from .model import DataError, Grid
    from .predict import PredictionTask, predict_series
    data = _load_data(cfg.paths.data)
    archive = PosteriorArchive.load(_need(cfg.paths.archive, "archive path"))
    try:
        grid = Grid.read_csv(_need(cfg.paths.grid, "grid path"))
    except OSError as exc:
        raise DataError(f"cannot read grid: {exc}") from None
    _set_threads(cfg.sampler.threads)
    pc = cfg.prediction
    start_year = pc.start_year if pc.start_year is not None else int(data.year.min())
    try:
        task = PredictionTask(grid, start_year, pc.start_month, pc.months, pc.draws, pc.outputs, pc.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    res = predict_series(task, archive, data, cfg.model.m, cfg.model.tier)
    paths = res.write(cfg.paths.out)
    write_manifest(cfg.paths.out, "predict", cfg, {"outputs": paths})
    with open(os.path.join(cfg.paths.out, "timing.json"), "w", encoding="utf-8") as fh:
        json.dump({"seconds": round(res.seconds, 3), "grid_points": len(grid), "months": pc.months,
                   "draws": int(res.latent.shape[-1]) if res.latent.size else 0}, fh, indent=2)
        fh.write("\n")
    print(f"predict: wrote {', '.join(paths)}")
    return res


def cmd_validate(cfg: RunConfig):
    from .predict import holdout_split, validate, write_table
    data = _load_data(cfg.paths.data)
    _set_threads(cfg.sampler.threads)
    vc = cfg.validation
    try:
        split = holdout_split(data, vc.fraction, vc.tier, vc.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    report, _ = validate(data, split, cfg.sampler_config(), cfg.priors_obj(), seed=cfg.prediction.seed)
    os.makedirs(cfg.paths.out, exist_ok=True)
    path = write_table(os.path.join(cfg.paths.out, "validation.csv"), ("response", "rmse", "relative_error_pct",
                                                                       "n"), report.rows())
    write_manifest(cfg.paths.out, "validate", cfg, {"validation_rows": [int(r) for r in split.validation_rows],
                                                    "excluded_regions": report.excluded_regions})
    print("response  RMSE  100*RMSE/Range(Y)  n")
    for r in report.rows():
        print(f"{r[0]:8s} {r[1]:.4f} {r[2]:.3f} {r[3]}")
    if report.excluded_regions:
        print(f"excluded single-station ecoregions (tier {vc.tier}): {report.excluded_regions}")
    return report, path


def cmd_simulate(cfg: RunConfig):
    from .inference import ParameterSet, stream
    from .model import Grid
    from .simulate import default_transform, demo_layout, grid_layout, random_layout, reference_params, simulate
    sc = cfg.simulation
    rng = stream(sc.seed, "simulate", 0)
    if sc.layout == "demo":
        layout = demo_layout(rng, sc.sites, sc.extent_km)
    elif sc.layout == "random":
        layout = random_layout(sc.sites, rng, sc.extent_km, sc.regions)
    else:
        raise ConfigError(f"unknown layout {sc.layout!r}")
    n_regions = int(layout.tiers[:, cfg.model.tier - 2].max()) if cfg.model.tier > 1 else 1
    truth = reference_params(n_regions, sc.range_shift)
    if sc.params:
        try:
            with open(sc.params, encoding="utf-8") as fh:
                given = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read true parameters: {exc}") from None
        names = ParameterSet.names(n_regions)
        unknown = sorted(set(given) - set(names))
        if unknown:
            raise ConfigError(f"unknown true parameters: {', '.join(unknown)}")
        vec = truth.to_vector()
        for k, v in given.items():
            vec[names.index(k)] = float(v)
        truth = ParameterSet.from_vector(vec, n_regions)
    try:
        sim = simulate(layout, truth, default_transform(), n_months=sc.months, start_year=sc.start_year,
                       tier=cfg.model.tier, m=cfg.model.m, rng=stream(sc.seed, "simulate", 1),
                       missing_fraction=sc.missing_fraction)
    except ValueError as exc:
        raise ConfigError(f"invalid true parameters: {exc}") from None
    out = cfg.paths.data or os.path.join(cfg.paths.out, "simulated.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    sim.data.write_csv(out)
    truth_path = os.path.splitext(out)[0] + "_truth.json"
    with open(truth_path, "w", encoding="utf-8") as fh:
        json.dump(dict(zip(ParameterSet.names(n_regions), map(float, truth.to_vector()))), fh, indent=2)
        fh.write("\n")
    g = grid_layout(layout, extent=sc.extent_km)
    Grid(g.site_id, g.easting, g.northing, g.elevation_m, g.tiers).write_csv(os.path.splitext(out)[0] + "_grid.csv")
    print(f"simulate: {len(sim.data)} records written to {out}")
    return sim


def dic_table(entries):
    """Rows ``k``, columns ``m``; the smallest DIC is flagged with ``*``."""
    ks = sorted({e["tier"] for e in entries})
    ms = sorted({e["m"] for e in entries})
    best = min(entries, key=lambda e: e["dic"])
    cell = {(e["tier"], e["m"]): e for e in entries}
    header = ["k"] + [f"m={m}" for m in ms]
    rows = []
    for k in ks:
        row = [str(k)]
        for m in ms:
            e = cell.get((k, m))
            row.append("" if e is None else f"{e['dic']:.3f}" + ("*" if e is best else ""))
        rows.append(row)
    return header, rows


def cmd_dic(cfg: RunConfig, archives):
    from .inference import PosteriorArchive, dic
    from .model import DataError
    if not archives:
        raise ConfigError("at least one archive is required")
    loaded = [PosteriorArchive.load(a) for a in archives]
    hashes = {a.manifest["data_hash"] for a in loaded}
    if len(hashes) != 1:
        raise DataError("archives were fitted to different datasets")
    data = _load_data(cfg.paths.data or loaded[0].manifest.get("data_path"))
    if data.digest() not in hashes:
        raise DataError("data file does not match the archives")
    entries = []
    for path, a in zip(archives, loaded):
        value, d_bar, p_d = dic(a, data)
        entries.append({"archive": path, "tier": a.manifest["tier"], "m": a.manifest["m"], "dic": value,
                        "d_bar": d_bar, "p_d": p_d})
    keys = [(e["tier"], e["m"]) for e in entries]
    if len(set(keys)) != len(keys):
        raise ConfigError("two archives share the same (k, m) cell")
    header, rows = dic_table(entries)
    os.makedirs(cfg.paths.out, exist_ok=True)
    from .predict import write_table
    write_table(os.path.join(cfg.paths.out, "dic_table.csv"), header, rows)
    write_table(os.path.join(cfg.paths.out, "dic_values.csv"), ("archive", "k", "m", "dic", "d_bar", "p_d"),
                [[e["archive"], e["tier"], e["m"], e["dic"], e["d_bar"], e["p_d"]] for e in entries])
    width = max(len(h) for h in header + [c for r in rows for c in r]) + 2
    print("".join(h.rjust(width) for h in header))
    for r in rows:
        print("".join(c.rjust(width) for c in r))
    return entries


def cmd_summary(cfg: RunConfig, archive_path):
    from .covariance import cross_correlations, practical_range, variance_decomposition, YEAR_DAYS
    from .inference import PosteriorArchive, convergence_table
    a = PosteriorArchive.load(_need(archive_path or cfg.paths.archive, "archive path"))
    rows = convergence_table(a)
    print(f"{'parameter':16s}{'mean':>12s}{'sd':>12s}{'q025':>12s}{'q975':>12s}{'ess':>10s}")
    for r in rows:
        print(f"{r['parameter']:16s}{r['mean']:12.4f}{r['sd']:12.4f}{r['q025']:12.4f}{r['q975']:12.4f}"
              f"{r['ess']:10.1f}")
    mean = {r["parameter"]: r["mean"] for r in rows}
    print("\npractical ranges (posterior means)")
    for i in (1, 2, 3):
        print(f"  y{i}: spatial {practical_range('spatial', mean[f'phi_sp_{i}']):.3f} km, "
              f"temporal {practical_range('temporal', mean[f'phi_ti_{i}']) * YEAR_DAYS:.2f} days, "
              f"cyclical {practical_range('cyclical', mean[f'phi_cy_{i}']) * YEAR_DAYS:.2f} days")
    sigma = a.parameter_set(0).sigma * 0
    for d in range(len(a)):
        sigma += a.parameter_set(d).sigma / len(a)
    print("\nvariance shares (seasonal, residual, space-time)")
    for i in range(3):
        shares = variance_decomposition(mean[f"sigma2_cy_{i + 1}"], mean[f"sigma2_eps_{i + 1}"], sigma[i, i])
        print(f"  y{i + 1}: " + ", ".join(f"{s:.3f}" for s in shares))
    print("cross-correlations (12, 13, 23): " + ", ".join(f"{c:.3f}" for c in cross_correlations(sigma)))
    print("acceptance: " + ", ".join(f"{k} {v:.2f}" for k, v in sorted(a.manifest.get("acceptance", {}).items())))
    if cfg.paths.out:
        os.makedirs(cfg.paths.out, exist_ok=True)
        write_convergence(a, os.path.join(cfg.paths.out, "summary.csv"))
    return rows


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser():
    p = _Parser(prog="stnngp", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="TOML or JSON configuration file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--threads", type=int, help="worker threads")
        sp.add_argument("--seed", type=int)
        sp.add_argument("-v", "--verbose", action="store_true")

    def model(sp):
        sp.add_argument("--data", help="station CSV")
        sp.add_argument("--tier", type=int)
        sp.add_argument("--m", type=int, help="neighbours per point")
        sp.add_argument("--space-weight", dest="space_weight", type=float)

    def sampler(sp):
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--burn-in", dest="burn_in", type=int)
        sp.add_argument("--thin", type=int)

    sp = sub.add_parser("fit", help="run the sampler and write an archive")
    common(sp), model(sp), sampler(sp)
    sp.add_argument("--archive", help="archive directory (default OUT/archive)")
    sp.add_argument("--checkpoint", help="checkpoint written if an iteration fails")
    sp.add_argument("--resume", help="resume from a checkpoint")

    sp = sub.add_parser("predict", help="posterior prediction on a grid")
    common(sp), model(sp)
    sp.add_argument("--archive")
    sp.add_argument("--grid")
    sp.add_argument("--start-year", dest="start_year", type=int)
    sp.add_argument("--start-month", dest="start_month", type=int)
    sp.add_argument("--months", type=int)
    sp.add_argument("--draws", type=int)

    sp = sub.add_parser("validate", help="holdout validation with RMSE report")
    common(sp), model(sp), sampler(sp)
    sp.add_argument("--fraction", type=float)
    sp.add_argument("--split-tier", dest="split_tier", type=int)

    sp = sub.add_parser("simulate", help="write a synthetic dataset")
    common(sp)
    sp.add_argument("--data", help="output CSV path")
    sp.add_argument("--sites", type=int)
    sp.add_argument("--months", dest="sim_months", type=int)
    sp.add_argument("--params", help="JSON file of true parameter values")
    sp.add_argument("--tier", type=int)

    sp = sub.add_parser("dic", help="DIC table over archives")
    common(sp)
    sp.add_argument("archives", nargs="+")
    sp.add_argument("--data")

    sp = sub.add_parser("summary", help="posterior summaries of an archive")
    common(sp)
    sp.add_argument("archive_path", nargs="?")
    return p


def main(argv=None):
    from .model import DataError
    from .nngp import NumericalError
    from .predict import ArchiveMismatch
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
        if args.command == "simulate":
            cfg.simulation = replace(cfg.simulation, seed=args.seed if args.seed is not None else cfg.simulation.seed)
        elif args.command == "predict" and args.seed is not None:
            cfg.prediction = replace(cfg.prediction, seed=args.seed)
        if args.command == "fit":
            cmd_fit(cfg, args.resume, args.checkpoint)
        elif args.command == "predict":
            cmd_predict(cfg)
        elif args.command == "validate":
            cmd_validate(cfg)
        elif args.command == "simulate":
            cmd_simulate(cfg)
        elif args.command == "dic":
            cmd_dic(cfg, args.archives)
        elif args.command == "summary":
            cmd_summary(cfg, args.archive_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ArchiveMismatch, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
