"""Experiment runner: JSON configs in, CSV artifacts + manifest out.

Subcommands:
    run <config.json> [--output-dir DIR]   dispatch one experiment
    compare <run_dir> <run_dir> [...]      align finished runs into a table
    selftest                               gradient / equivalence / scaling checks

Exit codes: 0 success, 2 config error, 3 numeric divergence, 4 infeasible
schedule, 1 anything else. Identical config + seed reproduces numeric CSV
fields byte-for-byte.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, boolpoly, netcore, sharedbase, sinelab, stability, subnet, trainers
from .numkit import RngStream, format_float

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_SCHEDULE = 4


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config schemas: {key: default}; None means required
# ---------------------------------------------------------------------------

SCHEDULE_KEYS = {"stages", "mode", "target_avg", "warmup_steps", "round_to"}

DEFAULTS = {
    "boolpoly_train": {
        "method": "raptr",            # raptr | pld | stacking | baseline | width_raptr
        "seed": 1,
        "seeds": None,                # list of seeds -> replica fan-out
        "d": 30, "support_width": 10, "max_degree": 5, "terms_per_degree": 10,
        "depth": 12, "hidden_mult": 4,
        "batch_size": 64, "total_steps": 20000,
        "optimizer": "adam", "lr": 1e-3, "final_decay": "none", "lr_warmup": 0,
        "schedule": {"stages": [{"size": 6}, {"size": 8}, {"size": 10}, {"size": 12}],
                     "mode": "proportional", "target_avg": 9.6},
        "use_scaling": True,
        "alpha_bar": 0.6, "gamma_f": 100.0,
        "stack_sizes": [6, 9, 12], "growth_op": "topstack",
        "group_schedule": [[0, 2], [10000, 4]], "n_groups": 4,
        "eval_every": 500, "eval_set_size": 4096,
        "component_every": 2000, "mc_samples": 100000,
        "mc_samples_trajectory": 20000,
        "boundary_eval_delta": 50,
        "save_checkpoint": True,
    },
    "stability_sweep": {
        "seed": 1,
        "d": 100, "probes": 100, "delta": 0.2, "head_dim": 16,
        "cases": None,                 # explicit [{L, tau, residual, layernorm}, ...]
        "L_list": [8, 16, 32, 64, 128],
        "tau_list": [0.0, 0.25, 0.5, 0.75],
    },
    "sinelab": {
        "seed": 1, "d": 5, "eta": 1e-3,
        "steps_bias": 5000, "steps_phase1": 5000, "steps_phase2": 5000,
    },
    "sharedbase_check": {
        "seed": 1, "n_cases": 100, "d": 8, "depth": 6, "hidden_mult": 2,
        "batch_size": 4, "block_kind": "linear_ln", "fold_scales": True,
    },
    "schedule_report": {
        "depth": 24, "total_steps": 400000, "round_to": 1000,
        "schedule": {"stages": [{"size": 6}, {"size": 12}, {"size": 18}, {"size": 24}],
                     "mode": "proportional", "target_avg": 20},
    },
}


def resolve_config(raw: dict) -> dict:
    if "config" in raw and "experiment" not in raw:
        raw = raw["config"]           # accept a manifest as config
    if "experiment" not in raw:
        raise ConfigError("config needs an 'experiment' key")
    exp = raw["experiment"]
    if exp not in DEFAULTS:
        raise ConfigError(f"unknown experiment {exp!r}; choose from {sorted(DEFAULTS)}")
    schema = DEFAULTS[exp]
    unknown = set(raw) - set(schema) - {"experiment", "output_dir"}
    if unknown:
        raise ConfigError(f"unknown config keys for {exp}: {sorted(unknown)}")
    cfg = {"experiment": exp}
    for key, default in schema.items():
        cfg[key] = raw.get(key, default)
    sched = cfg.get("schedule")
    if isinstance(sched, dict):
        bad = set(sched) - SCHEDULE_KEYS
        if bad:
            raise ConfigError(f"unknown schedule keys: {sorted(bad)}")
        for st in sched.get("stages", []):
            bad = set(st) - {"size", "fixed"}
            if bad:
                raise ConfigError(f"unknown stage keys: {sorted(bad)}")
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def write_manifest(outdir: Path, cfg: dict, artifacts: list[str], extra: dict | None = None):
    manifest = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "package_version": __version__,
        "artifacts": sorted(artifacts),
    }
    if extra:
        manifest.update(extra)
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# boolpoly_train
# ---------------------------------------------------------------------------


def _build_boolpoly_net(cfg: dict, seed: int) -> netcore.ResidualNet:
    rng = RngStream(seed, 0)
    d = cfg["d"]
    m = cfg["hidden_mult"] * d
    blocks = [netcore.ReluMlp.init(d, m, rng) for _ in range(cfg["depth"])]
    head = netcore.ScalarReadout.init(d, rng)
    return netcore.ResidualNet(blocks, head)


def _poly_for(cfg: dict, seed: int) -> boolpoly.SparsePolynomial:
    return boolpoly.sample_target(cfg["d"], cfg["max_degree"], cfg["terms_per_degree"],
                                  cfg["support_width"], RngStream(seed, 10))


def run_boolpoly_single(cfg: dict, seed: int, outdir: Path) -> dict:
    outdir.mkdir(parents=True, exist_ok=True)
    poly = _poly_for(cfg, seed)
    net = _build_boolpoly_net(cfg, seed)
    data_rng = RngStream(seed, 1)
    gate_rng = RngStream(seed, 2)
    eval_rng = RngStream(seed, 3)

    buf = {"x": None, "y": None, "pos": 0}

    def data_fn(batch, rng):
        # refill in bulk; rademacher draws dominate per-step cost otherwise
        if buf["x"] is None or buf["pos"] + batch > buf["x"].shape[0]:
            buf["x"] = rng.rademacher(256 * batch, cfg["d"])
            buf["y"] = boolpoly.eval_poly(poly, buf["x"])
            buf["pos"] = 0
        i = buf["pos"]
        buf["pos"] = i + batch
        return buf["x"][i:i + batch], buf["y"][i:i + batch]

    eval_x = eval_rng.rademacher(cfg["eval_set_size"], cfg["d"])
    eval_y = boolpoly.eval_poly(poly, eval_x)

    def eval_fn(net):
        pred = net.forward(eval_x).output
        return float(np.mean((pred - eval_y) ** 2))

    total = cfg["total_steps"]
    comp_steps = sorted(set(range(cfg["component_every"] - 1, total,
                                  cfg["component_every"])) | {total - 1})
    component_rows = []

    def components_at(t, net):
        if t not in comp_steps:
            return
        n = cfg["mc_samples"] if t == total - 1 else cfg["mc_samples_trajectory"]
        rng = RngStream(seed, 400 + t)
        f = lambda x: net.forward(x).output
        errs = boolpoly.all_component_errors(f, poly, ("mc", n, rng))
        for degree in sorted(errs):
            err, se = errs[degree]
            component_rows.append((t, degree, err, se))

    opt = trainers.make_optimizer(cfg["optimizer"])
    lrs = trainers.LrSchedule(cfg["lr"], cfg["lr_warmup"], cfg["final_decay"])
    method = cfg["method"]
    common = dict(batch_size=cfg["batch_size"], rng=data_rng, eval_fn=eval_fn,
                  eval_every=cfg["eval_every"], step_hook=components_at)
    if method == "baseline":
        metrics = trainers.train_baseline(net, data_fn, total, opt, lrs, **common)
        boundaries = []
    elif method == "raptr":
        sched = subnet.schedule_from_config(cfg["schedule"], cfg["depth"], total)
        boundaries = sched.boundaries()
        delta = cfg["boundary_eval_delta"]
        extras = [b + s * delta for b in boundaries for s in (-1, 1)]
        metrics = trainers.train_raptr(net, data_fn, sched, opt, lrs,
                                       gate_rng=gate_rng, use_scaling=cfg["use_scaling"],
                                       extra_eval_steps=extras, **common)
    elif method == "pld":
        metrics = trainers.train_pld(net, data_fn, cfg["alpha_bar"], cfg["gamma_f"],
                                     total, opt, lrs, gate_rng=gate_rng, **common)
        boundaries = []
    elif method == "stacking":
        def factory(depth):
            sub = dict(cfg)
            sub["depth"] = depth
            return _build_boolpoly_net(sub, seed)
        net, metrics = trainers.train_stacking(factory, cfg["growth_op"],
                                               cfg["stack_sizes"], total, opt, lrs,
                                               data_fn, **common)
        boundaries = []
    elif method == "width_raptr":
        gs = [(int(a), int(b)) for a, b in cfg["group_schedule"]]
        metrics = trainers.train_width_raptr(net, data_fn, gs, total, opt, lrs,
                                             n_groups=cfg["n_groups"],
                                             gate_rng=gate_rng, **common)
        boundaries = []
    else:
        raise ConfigError(f"unknown method {method!r}")

    metrics.write_csv(outdir / "metrics.csv")
    with open(outdir / "components.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "degree", "error", "stderr"])
        for t, degree, err, se in component_rows:
            w.writerow([t, degree, format_float(err), format_float(se)])
    if cfg["save_checkpoint"]:
        netcore.save_checkpoint(net, outdir / "net.ckpt")
    run_cfg = dict(cfg)
    run_cfg["seed"] = seed
    run_cfg.pop("seeds", None)
    write_manifest(outdir, run_cfg,
                   ["metrics.csv", "components.csv"] +
                   (["net.ckpt"] if cfg["save_checkpoint"] else []),
                   {"target_poly": poly.to_dict(), "boundaries": boundaries,
                    "final_eval_loss": metrics.final_eval_loss(),
                    "total_flops_ratio": metrics.total_flops_ratio})
    return {"seed": seed, "final_eval_loss": metrics.final_eval_loss(),
            "total_flops_ratio": metrics.total_flops_ratio}


def _replica(args):
    cfg, seed, outdir = args
    return run_boolpoly_single(cfg, seed, Path(outdir))


def run_boolpoly(cfg: dict, outdir: Path):
    seeds = cfg.get("seeds")
    if not seeds:
        run_boolpoly_single(cfg, cfg["seed"], outdir)
        return
    outdir.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, s, str(outdir / f"seed{s}")) for s in seeds]
    workers = int(os.environ.get("RAPTR_LAB_THREADS", "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replica, jobs))
    else:
        results = [_replica(j) for j in jobs]
    results.sort(key=lambda r: r["seed"])
    with open(outdir / "aggregate.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "final_eval_loss", "total_flops_ratio"])
        for r in results:
            w.writerow([r["seed"], format_float(r["final_eval_loss"]),
                        format_float(r["total_flops_ratio"])])
    write_manifest(outdir, cfg, ["aggregate.csv"],
                   {"median_final_eval_loss":
                    float(np.median([r["final_eval_loss"] for r in results]))})


# ---------------------------------------------------------------------------
# stability_sweep
# ---------------------------------------------------------------------------


def run_stability(cfg: dict, outdir: Path):
    outdir.mkdir(parents=True, exist_ok=True)
    cases = cfg["cases"]
    if cases is None:
        cases = [{"L": L, "tau": tau, "residual": True, "layernorm": True}
                 for tau in cfg["tau_list"] for L in cfg["L_list"]]
    stab_rows = []
    gap_rows = []
    for i, case in enumerate(cases):
        lcfg = stability.LinearNetConfig(
            L=int(case["L"]), d=int(case.get("d", cfg["d"])),
            residual=bool(case.get("residual", True)),
            layernorm=bool(case.get("layernorm", True)),
            tau=float(case.get("tau", 0.0)), delta=cfg["delta"],
            head_dim=cfg["head_dim"])
        rng = RngStream(cfg["seed"], 1000 + i)
        profile, summary = stability.linear_net_experiment(lcfg, cfg["probes"], rng)
        cid = f"c{i:03d}_L{lcfg.L}_tau{lcfg.tau}"
        for ell in range(1, lcfg.L + 1):
            stab_rows.append((cid, ell, profile.layer_norms[ell], profile.psi[ell - 1]))
        gap_rows.append((cid, lcfg.L, lcfg.tau, summary.loss_full, summary.loss_dropone,
                         summary.gap, summary.bound))
    with open(outdir / "stability.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_id", "ell", "norm", "psi"])
        for cid, ell, nrm, psi in stab_rows:
            w.writerow([cid, ell, format_float(nrm), format_float(psi)])
    with open(outdir / "gaps.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_id", "L", "tau", "loss_full", "loss_dropone", "gap",
                    "bound_rhs"])
        for cid, L, tau, lf, ld, gap, bound in gap_rows:
            w.writerow([cid, L, format_float(tau), format_float(lf), format_float(ld),
                        format_float(gap), format_float(bound)])
    write_manifest(outdir, cfg, ["stability.csv", "gaps.csv"])


# ---------------------------------------------------------------------------
# sinelab / sharedbase_check / schedule_report
# ---------------------------------------------------------------------------


def run_sinelab(cfg: dict, outdir: Path):
    outdir.mkdir(parents=True, exist_ok=True)
    plan = sinelab.PhasePlan(cfg["steps_bias"], cfg["steps_phase1"],
                             cfg["steps_phase2"], cfg["eta"])
    rows, params = sinelab.train_three_phase(plan, cfg["d"], RngStream(cfg["seed"], 20))
    sinelab.write_trajectory(rows, outdir / "sine_trajectory.csv")
    write_manifest(outdir, cfg, ["sine_trajectory.csv"],
                   {"final_loss": rows[-1].loss,
                    "final_params": {"p0": params.p0, "w1": params.w1.tolist(),
                                     "w2": params.w2.tolist(), "b1": params.b1,
                                     "b2": params.b2}})


def _random_equivalence_case(cfg: dict, rng: RngStream):
    d, L = cfg["d"], cfg["depth"]
    kind = cfg["block_kind"]
    if kind == "relu_mlp":
        blocks = [netcore.ReluMlp.init(d, cfg["hidden_mult"] * d, rng) for _ in range(L)]
    elif kind == "linear":
        blocks = [netcore.Linear.init(d, rng) for _ in range(L)]
    elif kind == "linear_ln":
        blocks = [netcore.LinearLn.init(d, rng) for _ in range(L)]
    else:
        raise ConfigError(f"unknown block kind {kind!r}")
    net = netcore.ResidualNet(blocks, netcore.ScalarReadout.init(d, rng))
    x = rng.gauss(cfg["batch_size"], d)
    bits = rng.bernoulli(0.6, size=L)
    bits[int(rng.integers(0, L))] = 1
    return net, x, bits


def run_sharedbase_check(cfg: dict, outdir: Path) -> float:
    outdir.mkdir(parents=True, exist_ok=True)
    rng = RngStream(cfg["seed"], 30)
    worst = 0.0
    for _ in range(cfg["n_cases"]):
        net, x, bits = _random_equivalence_case(cfg, rng)
        worst = max(worst, sharedbase.equivalence_check(net, x, bits))
        if cfg["fold_scales"]:
            worst = max(worst, sharedbase.equivalence_check(net, x, bits,
                                                            fold_scales=True))
    print(f"sharedbase equivalence: max gradient discrepancy {worst:.3e} "
          f"over {cfg['n_cases']} cases")
    write_manifest(outdir, cfg, [], {"max_discrepancy": worst})
    if worst > 1e-12:
        raise RuntimeError(f"shared-base equivalence violated: {worst:.3e}")
    return worst


def run_schedule_report(cfg: dict, outdir: Path):
    outdir.mkdir(parents=True, exist_ok=True)
    sched_cfg = dict(cfg["schedule"])
    target = sched_cfg.pop("target_avg", None)
    sched_cfg.pop("round_to", None)
    sched = subnet.schedule_from_config(sched_cfg, cfg["depth"], cfg["total_steps"])
    x = 0
    if target is not None:
        sched, x = subnet.solve_target_average(sched, float(target), cfg["round_to"])
    avg = subnet.schedule_avg_length(sched)
    print(f"stages: {[ (s.start, s.size) for s in sched.stages ]}")
    print(f"boundaries: {sched.boundaries()}")
    print(f"x = {x}")
    print(f"average subnetwork length: {avg:.6g}  "
          f"(relative flops {avg / cfg['depth']:.6g})")
    report = {"x": x, "boundaries": sched.boundaries(),
              "stage_lengths": sched.stage_lengths(), "avg_length": avg,
              "relative_flops": avg / cfg["depth"]}
    with open(outdir / "schedule.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_manifest(outdir, cfg, ["schedule.json"], {"report": report})


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def compare_runs(run_dirs: list[str], out_path: str | None = None) -> list[dict]:
    if len(run_dirs) < 2:
        raise ConfigError("compare needs at least two run directories")
    rows = []
    task_keys = None
    for rd in run_dirs:
        rd = Path(rd)
        manifest = json.loads((rd / "manifest.json").read_text())
        cfg = manifest["config"]
        if cfg.get("experiment") != "boolpoly_train":
            raise ConfigError(f"{rd} is not a boolpoly_train run")
        key = (cfg["d"], cfg["depth"], cfg["max_degree"], cfg["support_width"],
               cfg["terms_per_degree"])
        if task_keys is None:
            task_keys = key
        elif key != task_keys:
            raise ConfigError(f"{rd} was run on a different task (got {key}, "
                              f"expected {task_keys})")
        row = {"run": str(rd), "method": cfg["method"], "seed": cfg.get("seed"),
               "final_eval_loss": manifest.get("final_eval_loss"),
               "flops_ratio": manifest.get("total_flops_ratio")}
        comp = rd / "components.csv"
        if comp.exists():
            last = {}
            with open(comp) as fh:
                for rec in csv.DictReader(fh):
                    last[int(rec["degree"])] = float(rec["error"])
            for degree in sorted(last):
                row[f"component_error_deg{degree}"] = last[degree]
        rows.append(row)
    cols = ["run", "method", "seed", "final_eval_loss", "flops_ratio"]
    extra = sorted({k for r in rows for k in r if k.startswith("component_")})
    cols += extra
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join(
            "" if r.get(c) is None else
            (format_float(r[c]) if isinstance(r.get(c), float) else str(r[c]))
            for c in cols))
    table = "\n".join(lines) + "\n"
    print(table, end="")
    if out_path:
        Path(out_path).write_text(table)
    return rows


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------


def selftest() -> int:
    from . import selfcheck
    return selfcheck.run_all()


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def run_config(cfg: dict, outdir: Path):
    exp = cfg["experiment"]
    if exp == "boolpoly_train":
        run_boolpoly(cfg, outdir)
    elif exp == "stability_sweep":
        run_stability(cfg, outdir)
    elif exp == "sinelab":
        run_sinelab(cfg, outdir)
    elif exp == "sharedbase_check":
        run_sharedbase_check(cfg, outdir)
    elif exp == "schedule_report":
        run_schedule_report(cfg, outdir)
    else:
        raise ConfigError(f"unknown experiment {exp!r}")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="raptrlab", description=__doc__)
    sub = parser.add_subparsers(dest="cmd", required=True)
    p_run = sub.add_parser("run", help="run one experiment from a JSON config")
    p_run.add_argument("config")
    p_run.add_argument("--output-dir", default=None)
    p_cmp = sub.add_parser("compare", help="summarize finished runs side by side")
    p_cmp.add_argument("run_dirs", nargs="+")
    p_cmp.add_argument("--out", default=None)
    sub.add_parser("selftest", help="gradient, equivalence and scaling checks")
    args = parser.parse_args(argv)

    try:
        if args.cmd == "run":
            raw = json.loads(Path(args.config).read_text())
            cfg = resolve_config(raw)
            outdir = args.output_dir or raw.get("output_dir")
            if outdir is None:
                raise ConfigError("give --output-dir or an output_dir config key")
            run_config(cfg, Path(outdir))
            return EXIT_OK
        if args.cmd == "compare":
            compare_runs(args.run_dirs, args.out)
            return EXIT_OK
        if args.cmd == "selftest":
            return selftest()
    except (ConfigError, json.JSONDecodeError, FileNotFoundError, KeyError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except subnet.ScheduleError as e:
        print(f"infeasible schedule: {e}", file=sys.stderr)
        return EXIT_SCHEDULE
    except (trainers.TrainingDiverged, netcore.NumericError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
