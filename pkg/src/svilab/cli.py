"""Config-driven experiment runner.

Subcommands: run, kkt, clt, saa, decay, shadow, regularity.  Every stage
draws its randomness from a seed derived from (master seed, stage id), and
replications split further inside the Monte Carlo engine, so re-running a
config reproduces byte-identical reports.  Outputs are JSON reports plus
flat CSV dumps (comma-separated, header row, LF endings, 17 significant
digits) and a manifest listing every emitted file with its content hash.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from . import __version__
from .asymptotics import predicted_covariance
from .config import ConfigError, ExperimentConfig, config_from_dict, load_config, resolve_instance
from .diagnostics import (
    check_regularity,
    distance_decay,
    monte_carlo_clt,
    monte_carlo_shadow,
)
from .engine import default_threads
from .solvers import SolverConfig, StepSchedule, run_saa

STAGE_IDS = {"kkt": 0, "clt": 1, "saa": 2, "decay": 3, "shadow": 4, "regularity": 5}


def stage_seed(master_seed, stage):
    ss = np.random.SeedSequence([int(master_seed), STAGE_IDS[stage]])
    return int(ss.generate_state(1, np.uint64)[0] >> 1)   # keep it a positive int64


def _fmt(value):
    return f"{value:.17g}"


def write_csv(path, header, rows):
    """CSV with LF endings and 17-significant-digit floats."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(
            _fmt(v) if isinstance(v, float) else str(v) for v in row
        ))
    Path(path).write_bytes(("\n".join(lines) + "\n").encode())


def write_json(path, payload):
    Path(path).write_bytes(
        (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode()
    )


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class StageRecorder:
    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.stages = []
        self.failed = False

    def run(self, name, fn):
        t0 = time.perf_counter()
        entry = {"name": name, "files": []}
        try:
            files = fn() or []
            entry["status"] = "ok"
            entry["files"] = [
                {"path": str(Path(f).name), "sha256": _sha256(f)} for f in files
            ]
        except Exception as exc:            # stage isolation: record and move on
            entry["status"] = f"error: {type(exc).__name__}: {exc}"
            self.failed = True
        entry["wall_time_s"] = round(time.perf_counter() - t0, 3)
        self.stages.append(entry)
        return entry

    def write_manifest(self, config_hash):
        payload = {
            "code_version": __version__,
            "config_hash": config_hash,
            "stages": self.stages,
        }
        write_json(self.out_dir / "manifest.json", payload)


# ---------------------------------------------------------------------------
# stage implementations
# ---------------------------------------------------------------------------

def _stage_kkt(cfg: ExperimentConfig, bundle, out_dir):
    rep = predicted_covariance(
        bundle.vi, bundle.nlp, bundle.x_star,
        mc_samples=int(cfg.tolerances["mc_samples"]),
        seed=stage_seed(cfg.seed, "kkt"),
        tol=float(cfg.tolerances["active_set_tol"]),
    )
    payload = rep.to_json_dict()
    payload["active_set"] = [i + 1 for i in payload["active_set"]]   # 1-based
    payload["stationarity_residual"] = float(rep.kkt.stationarity_residual)
    path = Path(out_dir) / "asymptotics_report.json"
    write_json(path, payload)
    return rep, [path]


def _stage_clt(cfg, bundle, token, predicted, out_dir, threads):
    reps = int(cfg.clt.get("reps", cfg.reps))
    solver_cfg = SolverConfig(
        schedule=StepSchedule(cfg.c, cfg.gamma),
        iterations=cfg.iterations,
        seed=stage_seed(cfg.seed, "clt"),
        x0=None if cfg.x0 is None else np.asarray(cfg.x0, dtype=float),
    )
    report = monte_carlo_clt(
        bundle.vi, bundle.x_star, solver_cfg, reps, predicted,
        manifold=bundle.manifold, threads=threads, instance_token=token,
    )
    files = [Path(out_dir) / "clt_report.json"]
    write_json(files[0], report.to_json_dict())

    rows = [
        (r, j + 1, float(report.deviations[r, j]))
        for r in range(report.included)
        for j in range(report.deviations.shape[1])
    ]
    files.append(Path(out_dir) / "clt_deviations.csv")
    write_csv(files[-1], ["rep", "coord", "value"], rows)

    for j in range(report.tangent_components.shape[1]):
        samples = np.sort(report.tangent_components[:, j])
        sd = np.sqrt(report.predicted_tangent_variances[j])
        gauss = ndtr(samples / sd)
        n = len(samples)
        cdf_rows = [
            (float(samples[i]), float((i + 1) / n), float(gauss[i]))
            for i in range(n)
        ]
        p = Path(out_dir) / f"clt_cdf_tangent_{j + 1}.csv"
        write_csv(p, ["x", "empirical_cdf", "gaussian_cdf"], cdf_rows)
        files.append(p)

        counts, edges = np.histogram(samples, bins=30)
        hist_rows = [
            (float(edges[i]), float(edges[i + 1]), int(counts[i]))
            for i in range(len(counts))
        ]
        p = Path(out_dir) / f"clt_hist_tangent_{j + 1}.csv"
        write_csv(p, ["bin_lo", "bin_hi", "count"], hist_rows)
        files.append(p)
    return report, files


def _stage_saa(cfg, bundle, predicted, out_dir):
    k = int(cfg.saa["samples"])
    runs = int(cfg.saa["runs"])
    children = np.random.SeedSequence(stage_seed(cfg.seed, "saa")).spawn(runs)
    devs, resids, iters = [], [], []
    for child in children:
        x, rep = run_saa(bundle.vi, k, seed=child)
        devs.append(np.sqrt(k) * (x - bundle.x_star))
        resids.append(rep.residual)
        iters.append(rep.iterations)
    devs = np.array(devs)
    u = predicted.tangent_basis
    tangent = devs @ u
    payload = {
        "samples": k,
        "runs": runs,
        "tangent_variances_empirical": [float(v) for v in tangent.var(axis=0, ddof=1)],
        "predicted_variance_tangent": [float(v) for v in predicted.tangent_variances()],
        "max_residual": float(np.max(resids)),
        "mean_iterations": float(np.mean(iters)),
    }
    files = [Path(out_dir) / "saa_report.json"]
    write_json(files[0], payload)
    rows = [
        (r, j + 1, float(devs[r, j]))
        for r in range(devs.shape[0])
        for j in range(devs.shape[1])
    ]
    files.append(Path(out_dir) / "saa_deviations.csv")
    write_csv(files[-1], ["rep", "coord", "value"], rows)
    return payload, files


def _stage_decay(cfg, bundle, token, out_dir, threads):
    solver_cfg = SolverConfig(
        schedule=StepSchedule(cfg.c, cfg.gamma),
        iterations=cfg.iterations,
        seed=stage_seed(cfg.seed, "decay"),
        x0=None if cfg.x0 is None else np.asarray(cfg.x0, dtype=float),
    )
    report = distance_decay(
        bundle.vi, bundle.manifold, solver_cfg,
        int(cfg.decay["reps"]), int(cfg.decay["k0"]), float(cfg.decay["delta"]),
        x_star=bundle.x_star, threads=threads, instance_token=token,
    )
    files = [Path(out_dir) / "decay_report.json"]
    write_json(files[0], report.to_json_dict())
    rows = [
        (int(report.ks[i]), float(report.avg_dist_sq[i]), int(report.survivor_counts[i]))
        for i in range(len(report.ks))
    ]
    files.append(Path(out_dir) / "decay_curve.csv")
    write_csv(files[-1], ["k", "avg_dist_sq", "survivors"], rows)
    return report, files


def _stage_shadow(cfg, bundle, token, out_dir, threads):
    solver_cfg = SolverConfig(
        schedule=StepSchedule(cfg.c, cfg.gamma),
        iterations=cfg.iterations,
        seed=stage_seed(cfg.seed, "shadow"),
        x0=None if cfg.x0 is None else np.asarray(cfg.x0, dtype=float),
    )
    report = monte_carlo_shadow(
        bundle.vi, bundle.manifold, solver_cfg,
        int(cfg.shadow["reps"]), int(cfg.shadow["k0"]), float(cfg.shadow["delta"]),
        f_m=bundle.f_m, x_star=bundle.x_star, threads=threads, instance_token=token,
    )
    files = [Path(out_dir) / "shadow_report.json"]
    write_json(files[0], report.to_json_dict())
    rows = [
        (int(report.ks[i]), float(report.alphas[i]), float(report.avg_resid_sq[i]))
        for i in range(len(report.ks))
        if np.isfinite(report.avg_resid_sq[i])
    ]
    files.append(Path(out_dir) / "shadow_curve.csv")
    write_csv(files[-1], ["k", "alpha", "avg_resid_sq"], rows)
    return report, files


def _stage_regularity(cfg, bundle, out_dir):
    report = check_regularity(
        bundle.vi, bundle.manifold, bundle.x_star,
        n_samples=int(cfg.regularity["samples"]),
        delta=float(cfg.regularity["delta"]),
        seed=stage_seed(cfg.seed, "regularity"),
        nlp=bundle.nlp,
        f_m=bundle.f_m,
    )
    files = [Path(out_dir) / "regularity_report.json"]
    write_json(files[0], report.to_json_dict())
    s = report.samples
    rows = [
        (float(s["dist"][i]), float(s["alpha"][i]),
         float(s["margin"][i]), float(s["e1_ratio"][i]))
        for i in range(len(s["dist"]))
    ]
    files.append(Path(out_dir) / "regularity_samples.csv")
    write_csv(files[-1], ["dist", "alpha", "margin", "e1_ratio"], rows)
    return report, files


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads=None,
                   config_hash="") -> int:
    """Execute the requested pipeline; returns a process exit code."""
    out_dir = Path(out_dir or cfg.out_dir)
    rec = StageRecorder(out_dir)
    threads = threads if threads is not None else default_threads()
    bundle, token = resolve_instance(cfg.instance)

    state = {}

    def kkt_stage():
        state["predicted"], files = _stage_kkt(cfg, bundle, out_dir)
        return files

    # the CLT needs the predicted covariance even when kkt was not requested
    wants_prediction = bool({"kkt", "clt", "saa"} & set(cfg.diagnostics))
    if wants_prediction:
        rec.run("kkt", kkt_stage)

    for name in cfg.diagnostics:
        if name == "kkt":
            continue   # always first, above
        if name == "clt":
            rec.run("clt", lambda: _stage_clt(
                cfg, bundle, token, state["predicted"], out_dir, threads)[1])
        elif name == "saa":
            rec.run("saa", lambda: _stage_saa(
                cfg, bundle, state["predicted"], out_dir)[1])
        elif name == "decay":
            rec.run("decay", lambda: _stage_decay(
                cfg, bundle, token, out_dir, threads)[1])
        elif name == "shadow":
            rec.run("shadow", lambda: _stage_shadow(
                cfg, bundle, token, out_dir, threads)[1])
        elif name == "regularity":
            rec.run("regularity", lambda: _stage_regularity(cfg, bundle, out_dir)[1])

    rec.write_manifest(config_hash)
    return 1 if rec.failed else 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _bundled_config_path(name):
    ref = resources.files("svilab") / "configs" / name
    return ref if ref.is_file() else None


def _load_cfg_from_args(args, default_diagnostics=None):
    if args.config:
        path = Path(args.config)
        if not path.exists():
            bundled = _bundled_config_path(path.name)
            if bundled is None:
                raise ConfigError(f"config file not found: {args.config}")
            path = bundled
        raw_bytes = Path(path).read_bytes()
        cfg = load_config(path)
        config_hash = hashlib.sha256(raw_bytes).hexdigest()
    elif getattr(args, "instance", None):
        cfg = config_from_dict({"instance": args.instance})
        config_hash = hashlib.sha256(args.instance.encode()).hexdigest()
    else:
        raise ConfigError("provide --config PATH or --instance NAME")
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if default_diagnostics is not None:
        cfg.diagnostics = tuple(default_diagnostics)
    cfg.validate()
    return cfg, config_hash


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="svilab",
        description="Stochastic VI solvers and Monte Carlo verification of "
                    "their asymptotic normality.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "kkt", "clt", "saa", "decay", "shadow", "regularity"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML experiment config (bundled names resolve too)")
        p.add_argument("--instance", help="built-in instance name")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="worker processes (default: SVILAB_THREADS or CPU count)")
    args = parser.parse_args(argv)

    try:
        if args.command == "run":
            cfg, config_hash = _load_cfg_from_args(args)
        else:
            cfg, config_hash = _load_cfg_from_args(args, default_diagnostics=[args.command])
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    code = run_experiment(cfg, out_dir=cfg.out_dir, threads=args.threads,
                          config_hash=config_hash)
    manifest = json.loads((Path(cfg.out_dir) / "manifest.json").read_text())
    for stage in manifest["stages"]:
        print(f"[{stage['status']}] {stage['name']} ({stage['wall_time_s']}s): "
              + ", ".join(f["path"] for f in stage["files"]))
    if args.command == "kkt" and manifest["stages"]:
        report_path = Path(cfg.out_dir) / "asymptotics_report.json"
        if report_path.exists():
            payload = json.loads(report_path.read_text())
            print("active_set:", payload["active_set"])
            print("multipliers:", payload["multipliers"])
            print("sosc_min_eig:", payload["sosc_min_eig"])
    return code


if __name__ == "__main__":
    sys.exit(main())
