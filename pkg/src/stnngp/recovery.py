"""Simulation-based recovery study: replicate fits on synthetic data with known truths."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .inference import FitContext, ParameterSet, SamplerConfig, dic, run_chain, stream
from .simulate import default_transform, random_layout, reference_params, simulate

# parameter families whose interval coverage is scored
COVERAGE_FAMILIES = ("beta", "sigma2_eps", "sigma2_cy", "phi_cy", "eta")


@dataclass
class RecoveryConfig:
    n_sites: int = 20
    n_months: int = 36
    extent_km: float = 40.0
    n_regions: int = 3
    range_shift: float = 4.0
    iterations: int = 5000
    burn_in: int = 2500
    thin: int = 2
    m: int = 10
    seed: int = 2024
    dense: bool = True


@dataclass
class Replicate:
    index: int
    covered: dict = field(default_factory=dict)   # parameter name -> bool
    dic: dict = field(default_factory=dict)       # m -> DIC
    seconds: dict = field(default_factory=dict)   # m -> fit wall time
    censored_ok: bool = True


def replicate_data(cfg: RecoveryConfig, r: int):
    rng = stream(cfg.seed, "simulate", r, 0)
    layout = random_layout(cfg.n_sites, rng, cfg.extent_km, cfg.n_regions)
    truth = reference_params(cfg.n_regions, cfg.range_shift)
    sim = simulate(layout, truth, default_transform(), n_months=cfg.n_months, tier=3, dense=cfg.dense,
                   rng=stream(cfg.seed, "simulate", r, 1))
    return sim


def interval_coverage(archive, truth: ParameterSet, level=0.95):
    """Whether each scored parameter's equal-tailed interval covers the truth."""
    tvec = truth.to_vector()
    lo_q, hi_q = (1 - level) / 2, 1 - (1 - level) / 2
    out = {}
    for j, name in enumerate(archive.names):
        if not name.startswith(COVERAGE_FAMILIES):
            continue
        x = archive.params[:, j]
        lo, hi = np.quantile(x, [lo_q, hi_q])
        out[name] = bool(lo <= tvec[j] <= hi)
    return out


def run_replicate(cfg: RecoveryConfig, r: int, ms=(10,), priors=None) -> Replicate:
    sim = replicate_data(cfg, r)
    rep = Replicate(r)
    for m in ms:
        sc = SamplerConfig(iterations=cfg.iterations, burn_in=cfg.burn_in, thin=cfg.thin, m=m, tier=3,
                           seed=cfg.seed * 1000 + r)
        t0 = time.perf_counter()
        ctx = FitContext(sim.data, sc, sim.transform)
        arch = run_chain(sim.data, sc, priors, sim.transform, ctx=ctx, callback=_censor_guard(ctx, rep))
        rep.seconds[m] = time.perf_counter() - t0
        rep.dic[m] = dic(arch, sim.data)[0]
        if m == cfg.m:
            rep.covered = interval_coverage(arch, sim.params)
    return rep


def _censor_guard(ctx, rep):
    cen = ctx.censored

    def check(it, state):
        if np.any(state.y[cen] > 0):
            rep.censored_ok = False
    return check


def summarize(reps):
    names = sorted({k for r in reps for k in r.covered})
    per_family = {}
    for fam in COVERAGE_FAMILIES:
        hits = [r.covered[k] for r in reps for k in r.covered if k.startswith(fam)]
        per_family[fam] = float(np.mean(hits)) if hits else float("nan")
    hits = [v for r in reps for v in r.covered.values()]
    return {"overall": float(np.mean(hits)) if hits else float("nan"), "families": per_family,
            "n_parameters": len(names)}


def source_digest():
    """Hash of the modules a fit depends on; cached replicates are valid only for matching code."""
    import hashlib
    from pathlib import Path
    here = Path(__file__).parent
    h = hashlib.sha256()
    for name in ("spacetime", "covariance", "nngp", "model", "inference", "simulate", "recovery"):
        h.update((here / f"{name}.py").read_bytes())
    return h.hexdigest()[:16]


def _cache_key(cfg: RecoveryConfig, r: int, ms):
    import hashlib
    import json
    from dataclasses import asdict
    blob = json.dumps({"cfg": asdict(cfg), "r": r, "ms": list(ms), "code": source_digest()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def run_study(cfg: RecoveryConfig, n_replicates=20, dic_replicates=10, dic_m=20, cache_dir=None, log=print):
    """Coverage over ``n_replicates`` fits at ``cfg.m``; the first ``dic_replicates`` are refitted at ``dic_m``.

    With ``cache_dir`` each finished replicate is stored as JSON keyed by config and code digest.
    """
    import json
    from dataclasses import asdict
    from pathlib import Path
    reps = []
    for r in range(n_replicates):
        ms = (cfg.m, dic_m) if r < dic_replicates else (cfg.m,)
        path = None
        if cache_dir is not None:
            path = Path(cache_dir) / f"replicate_{r:02d}_{_cache_key(cfg, r, ms)}.json"
            if path.exists():
                d = json.loads(path.read_text())
                rep = Replicate(d["index"], d["covered"], {int(k): v for k, v in d["dic"].items()},
                                {int(k): v for k, v in d["seconds"].items()}, d["censored_ok"])
                reps.append(rep)
                log(f"replicate {r}: cached")
                continue
        rep = run_replicate(cfg, r, ms)
        reps.append(rep)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(asdict(rep), indent=1))
        cov = np.mean(list(rep.covered.values()))
        log(f"replicate {r}: coverage {cov:.3f} dic {rep.dic} seconds {rep.seconds}")
    return reps


def dic_ordering(reps, small=10, large=20):
    """Number of replicates with DIC(large m) <= DIC(small m), and how many were compared."""
    pairs = [(r.dic[small], r.dic[large]) for r in reps if small in r.dic and large in r.dic]
    return sum(b <= a for a, b in pairs), len(pairs)
