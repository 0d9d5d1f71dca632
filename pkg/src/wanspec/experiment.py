"""Declarative experiment files: parsing, suite dispatch, CSV and manifest output.

An experiment file is TOML. Unknown keys are rejected and every diagnostic
names the offending line. Each run writes a CSV (one row per config point)
and a JSON manifest that embeds the file verbatim, so the run can be
reproduced from the manifest alone.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import re
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import tomli

from .controller import ControllerConfig
from .oracle import OracleConfig, OracleConfigError
from .sim import (
    ABLATION_STAGES,
    PROFILES,
    SimConfig,
    Workbench,
    _row,
    paired_point,
    phi_grid,
    sequences_for,
)
from .worker import WorkerConfig

SUITES = ("ablation", "phi_sweep", "deploy", "single")

CSV_COLUMNS = [
    "suite",
    "stage",
    "mode",
    "branching",
    "theta_on",
    "phi_on",
    "rtt_ms",
    "phi",
    "theta",
    "b",
    "s",
    "k",
    "seed",
    "iterations",
    "median_latency_ratio",
    "median_ctrl_draft_ratio",
    "median_latency_ms",
    "median_baseline_latency_ms",
    "median_ctrl_draft_passes",
    "median_baseline_draft_passes",
    "sync_stalls",
    "status",
]

SEED_COLUMNS = [
    "point",
    "seed",
    "latency_ms",
    "baseline_latency_ms",
    "ctrl_draft_passes",
    "baseline_draft_passes",
]

RATIO_FORMULAS = {
    "median_latency_ratio": (
        "median over seeds of sum(request latency) / sum(baseline request latency), "
        "baseline = sequential k drafts + 1 target step on identical oracle draws"
    ),
    "median_ctrl_draft_ratio": (
        "median over seeds of controller draft forward passes (local steps + extra "
        "catch-up batches) / all baseline draft forward passes"
    ),
}

SEED_ENV = "WANSPEC_SEED"


class ExperimentError(Exception):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = path or "<experiment>"
        if line is not None:
            where = f"{where}:{line}"
        super().__init__(f"{where}: {message}")
        self.line = line
        self.message = message


# key -> (type check, description); sections map to nested dicts
_SCHEMA: dict = {
    "suite": str,
    "profile": str,
    "seed": int,
    "iterations": int,
    "num_requests": int,
    "oracle": {
        "kind": str,
        "match_prob": float,
        "entropy_low": float,
        "entropy_high": float,
        "second_correct_prob": float,
        "trace_path": str,
        "sequence_length": int,
        "vocab_size": int,
        "eos_id": int,
    },
    "timing": {"t_target": float, "t_draft": float},
    "grid": {
        "rtt_ms": list,
        "phi": (float, list),
        "phi_points": int,
        "theta": float,
        "b": int,
        "s": int,
        "k": int,
        "R": float,
        "catchup_batch_limit": int,
        "max_nodes": int,
        "jitter_ms": float,
        "prompt_relay": bool,
    },
    "single": {
        "mode": str,
        "branching": bool,
        "theta_on": bool,
        "phi_on": bool,
    },
    "deploy": {"host": str, "baseline": str},
    "output": {"csv": str, "manifest": str},
}


def _key_line(text: str, section: str | None, key: str) -> int | None:
    """Best-effort 1-based line of `key` (inside `[section]` if given)."""
    current = None
    header = re.compile(r"^\s*\[\s*([A-Za-z0-9_.-]+)\s*\]")
    assign = re.compile(r"^\s*([A-Za-z0-9_-]+|\"[^\"]*\")\s*=")
    for n, line in enumerate(text.splitlines(), 1):
        m = header.match(line)
        if m:
            current = m.group(1)
            if section is not None and key is None and current == section:
                return n
            continue
        m = assign.match(line)
        if m and m.group(1).strip('"') == key and current == section:
            return n
    return None


def _type_ok(value, want) -> bool:
    if isinstance(want, tuple):
        return any(_type_ok(value, w) for w in want)
    if want is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if want is int:
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, want)


def _check_keys(doc: dict, text: str, path: str | None) -> None:
    for key, value in doc.items():
        if key not in _SCHEMA:
            raise ExperimentError(f"unknown key {key!r}", _key_line(text, None, key), path)
        want = _SCHEMA[key]
        if isinstance(want, dict):
            if not isinstance(value, dict):
                raise ExperimentError(f"{key!r} must be a section", _key_line(text, None, key), path)
            for sub, v in value.items():
                if sub not in want:
                    raise ExperimentError(
                        f"unknown key {sub!r} in [{key}]", _key_line(text, key, sub), path
                    )
                if not _type_ok(v, want[sub]):
                    raise ExperimentError(
                        f"[{key}] {sub} has the wrong type ({type(v).__name__})",
                        _key_line(text, key, sub),
                        path,
                    )
        elif not _type_ok(value, want):
            raise ExperimentError(
                f"{key} has the wrong type ({type(value).__name__})", _key_line(text, None, key), path
            )


@dataclass
class Experiment:
    suite: str
    base: SimConfig
    seed: int
    iterations: int
    rtt_grid: list[float]
    phi_values: list[float] | None
    phi_points: int
    profile: str
    text: str
    source: str | None
    csv_path: Path
    manifest_path: Path
    deploy_host: str = "127.0.0.1"
    deploy_baseline: str = "wallclock"
    resolved: dict = field(default_factory=dict)

    @property
    def seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.iterations)]


def parse_experiment(
    text: str,
    path: str | None = None,
    seed_override: int | None = None,
    base_dir: Path | None = None,
) -> Experiment:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ExperimentError(f"invalid TOML: {exc}", int(m.group(1)) if m else None, path) from None
    _check_keys(doc, text, path)

    def fail(msg, section=None, key=None):
        raise ExperimentError(msg, _key_line(text, section, key) if key else None, path)

    suite = doc.get("suite")
    if suite is None:
        fail("missing required key 'suite'")
    if suite not in SUITES:
        fail(f"suite must be one of {', '.join(SUITES)}", None, "suite")

    profile = doc.get("profile", "l40s")
    timing = dict(doc.get("timing", {}))
    if profile not in PROFILES and profile != "custom":
        fail(f"unknown profile {profile!r}; known: {', '.join(sorted(PROFILES))}, custom", None, "profile")
    prof = dict(PROFILES.get(profile, {}))
    prof.update(timing)
    if "t_target" not in prof or "t_draft" not in prof:
        fail(f"profile {profile!r} needs [timing] t_target and t_draft", None, "profile")

    seed = doc.get("seed", 0)
    if seed_override is not None:
        seed = seed_override
    iterations = doc.get("iterations", 20)
    if iterations < 1:
        fail("iterations must be >= 1", None, "iterations")
    num_requests = doc.get("num_requests", 10)
    if num_requests < 1:
        fail("num_requests must be >= 1", None, "num_requests")

    osec = dict(doc.get("oracle", {}))
    if "trace_path" in osec and base_dir is not None and not os.path.isabs(osec["trace_path"]):
        osec["trace_path"] = str((base_dir / osec["trace_path"]).resolve())
    oracle = OracleConfig(seed=seed, **osec)
    try:
        oracle.validate()
    except OracleConfigError as exc:
        fail(str(exc), "oracle", next(iter(osec), None))

    grid = doc.get("grid", {})
    rtt_grid = grid.get("rtt_ms", [20.0])
    if not rtt_grid:
        fail("grid rtt_ms must be non-empty", "grid", "rtt_ms")
    if not all(_type_ok(r, float) and r >= 0 for r in rtt_grid):
        fail("grid rtt_ms must hold non-negative numbers", "grid", "rtt_ms")
    rtt_grid = [float(r) for r in rtt_grid]

    phi = grid.get("phi", 0.5)
    phi_values = None
    if isinstance(phi, list):
        if not phi or not all(_type_ok(p, float) for p in phi):
            fail("grid phi list must be non-empty numbers", "grid", "phi")
        phi_values = [float(p) for p in phi]
        phi = phi_values[0]
    phi_points = grid.get("phi_points", 100)
    if phi_points < 2:
        fail("grid phi_points must be >= 2", "grid", "phi_points")

    ctrl = ControllerConfig(
        k=grid.get("k", 2),
        phi=float(phi),
        t_target=prof["t_target"],
        t_draft=prof["t_draft"],
        catchup_batch_limit=grid.get("catchup_batch_limit", 32),
        max_nodes=grid.get("max_nodes", 64),
    )
    worker = WorkerConfig(
        b=grid.get("b", 2),
        theta=float(grid.get("theta", 0.5)),
        s=grid.get("s", 4),
        t_draft=prof["t_draft"],
        max_nodes=grid.get("max_nodes", 64),
    )
    single = doc.get("single", {})
    mode = single.get("mode", "wanspec")
    base = SimConfig(
        rtt=rtt_grid[0],
        t_target=float(prof["t_target"]),
        t_draft=float(prof["t_draft"]),
        controller_cfg=ctrl,
        worker_cfg=worker,
        oracle_cfg=oracle,
        num_requests=num_requests,
        mode=mode,
        branching=single.get("branching", True),
        theta_on=single.get("theta_on", True),
        phi_on=single.get("phi_on", True),
        R=grid.get("R"),
        jitter=float(grid.get("jitter_ms", 0.0)),
        prompt_relay=grid.get("prompt_relay", suite == "deploy"),
    )
    try:
        base.validate()
        ctrl.validate()
        worker.validate()
    except ValueError as exc:
        fail(str(exc))

    deploy = doc.get("deploy", {})
    if deploy.get("baseline", "wallclock") not in ("wallclock", "simulated"):
        fail("deploy baseline must be 'wallclock' or 'simulated'", "deploy", "baseline")

    out = doc.get("output", {})
    csv_path = Path(out.get("csv", f"results/{suite}.csv"))
    manifest_path = Path(out.get("manifest", str(csv_path.with_suffix("")) + ".manifest.json"))

    exp = Experiment(
        suite=suite,
        base=base,
        seed=seed,
        iterations=iterations,
        rtt_grid=rtt_grid,
        phi_values=phi_values,
        phi_points=phi_points,
        profile=profile,
        text=text,
        source=path,
        csv_path=csv_path,
        manifest_path=manifest_path,
        deploy_host=deploy.get("host", "127.0.0.1"),
        deploy_baseline=deploy.get("baseline", "wallclock"),
    )
    exp.resolved = {
        "suite": suite,
        "profile": profile,
        "t_target": base.t_target,
        "t_draft": base.t_draft,
        "seed": seed,
        "iterations": iterations,
        "num_requests": num_requests,
        "rtt_ms": rtt_grid,
        "phi": phi_values if phi_values is not None else float(phi),
        "phi_points": phi_points,
        "k": ctrl.k,
        "b": worker.b,
        "s": worker.s,
        "theta": worker.theta,
        "R": base.R,
        "jitter_ms": base.jitter,
        "prompt_relay": base.prompt_relay,
        "oracle": {
            k: getattr(oracle, k)
            for k in (
                "kind",
                "match_prob",
                "entropy_low",
                "entropy_high",
                "second_correct_prob",
                "trace_path",
                "sequence_length",
                "vocab_size",
                "eos_id",
            )
        },
    }
    return exp


def load_experiment(path, seed_override: int | None = None) -> Experiment:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ExperimentError(f"cannot read: {exc.strerror}", None, str(p)) from None
    if seed_override is None and os.environ.get(SEED_ENV):
        try:
            seed_override = int(os.environ[SEED_ENV])
        except ValueError:
            raise ExperimentError(f"{SEED_ENV} must be an integer", None, str(p)) from None
    return parse_experiment(text, str(p), seed_override, p.parent)


# -- suite execution -----------------------------------------------------------

_BENCH: Workbench | None = None


def _init_pool(base: SimConfig, iterations: int) -> None:
    global _BENCH
    _BENCH = Workbench(base, iterations)


def _run_point(args) -> dict:
    suite, stage, cfg, seed, iterations = args
    point = paired_point(cfg, _BENCH.seeds, _BENCH.views, _BENCH.baseline)
    row = _row(suite, stage, cfg, point, seed, iterations)
    row["status"] = "ok"
    row["_seeds"] = list(
        zip(_BENCH.seeds, point.latencies, point.baseline_latencies, point.draft_passes, point.baseline_passes)
    )
    return row


def _grid_points(exp: Experiment, bench: Workbench) -> list[tuple]:
    base = exp.base
    pts = []
    if exp.suite == "ablation":
        for rtt in exp.rtt_grid:
            for stage, branching, theta_on, phi_on in ABLATION_STAGES:
                cfg = replace(base, rtt=rtt, mode="wanspec", branching=branching, theta_on=theta_on, phi_on=phi_on)
                pts.append(("ablation", stage, cfg))
    elif exp.suite == "phi_sweep":
        phis = exp.phi_values or phi_grid(bench.target_entropies(), exp.phi_points)
        for rtt in exp.rtt_grid:
            for phi in phis:
                cfg = replace(
                    base,
                    rtt=rtt,
                    mode="wanspec",
                    phi_on=True,
                    controller_cfg=replace(base.controller_cfg, phi=phi),
                )
                pts.append(("phi_sweep", "phi", cfg))
    elif exp.suite == "single":
        for rtt in exp.rtt_grid:
            stage = "baseline" if base.mode == "baseline_sequential" else "wanspec"
            pts.append(("single", stage, replace(base, rtt=rtt)))
    return [(s, st, c, exp.seed, exp.iterations) for s, st, c in pts]


def run_sim_suite(exp: Experiment, jobs: int = 1) -> list[dict]:
    bench = Workbench(exp.base, exp.iterations)
    points = _grid_points(exp, bench)
    if jobs <= 1 or len(points) <= 1:
        global _BENCH
        prev, _BENCH = _BENCH, bench
        try:
            return [_run_point(p) for p in points]
        finally:
            _BENCH = prev
    with ProcessPoolExecutor(
        max_workers=jobs, initializer=_init_pool, initargs=(exp.base, exp.iterations)
    ) as pool:
        # map preserves grid order whatever the completion order
        return list(pool.map(_run_point, points))


def run_deploy_suite(exp: Experiment) -> list[dict]:
    """Loopback runtime per RTT against a single-machine baseline."""
    from .runtime import run_loopback, wallclock_baseline
    from .sim import run_views
    from .wire import config_digest

    digest = config_digest(exp.text)
    base = replace(exp.base, mode="wanspec")
    rows = []
    baselines = {}
    for seed in exp.seeds:
        views = sequences_for(replace(base.oracle_cfg, seed=seed), base.num_requests)
        if exp.deploy_baseline == "wallclock":
            baselines[seed] = (views, wallclock_baseline(views, base.controller_cfg.k, base.t_target, base.t_draft))
        else:
            baselines[seed] = (views, run_views(replace(base, mode="baseline_sequential"), views))
    for rtt in exp.rtt_grid:
        cfg = replace(base, rtt=rtt)
        lat, passes, blat, bpass, stalls, used = [], [], [], [], [], []
        status = "ok"
        for seed in exp.seeds:
            views, bl = baselines[seed]
            try:
                ctrl_res, _ = run_loopback(
                    cfg.effective_controller(),
                    cfg.effective_worker(),
                    views,
                    digest,
                    emulate_rtt_ms=rtt,
                    jitter_ms=cfg.jitter,
                    seed=seed,
                )
            except Exception as exc:  # recorded per row, reflected in the exit code
                status = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
                break
            m = ctrl_res.metrics
            lat.append(m.total_latency)
            passes.append(m.controller_draft_passes)
            blat.append(bl.total_latency)
            bpass.append(bl.controller_draft_passes)
            stalls.append(int(m.total("sync_stalls")))
            used.append(seed)
        row = {c: "" for c in CSV_COLUMNS}
        ctrl, wk = cfg.effective_controller(), cfg.effective_worker()
        row.update(
            suite="deploy",
            stage="runtime",
            mode=cfg.mode,
            branching=int(cfg.branching),
            theta_on=int(cfg.theta_on),
            phi_on=int(cfg.phi_on),
            rtt_ms=rtt,
            phi=ctrl.phi,
            theta=wk.theta,
            b=wk.b,
            s=wk.s,
            k=ctrl.k,
            seed=exp.seed,
            iterations=exp.iterations,
            status=status,
        )
        row["_seeds"] = list(zip(used, lat, blat, passes, bpass))
        if status == "ok":
            row.update(
                median_latency_ratio=statistics.median(a / b for a, b in zip(lat, blat)),
                median_ctrl_draft_ratio=statistics.median(a / b for a, b in zip(passes, bpass)),
                median_latency_ms=statistics.median(lat),
                median_baseline_latency_ms=statistics.median(blat),
                median_ctrl_draft_passes=statistics.median(passes),
                median_baseline_draft_passes=statistics.median(bpass),
                sync_stalls=statistics.median(stalls),
            )
        rows.append(row)
    return rows


def run_experiment(exp: Experiment, jobs: int = 1) -> list[dict]:
    if exp.suite == "deploy":
        return run_deploy_suite(exp)
    return run_sim_suite(exp, jobs)


# -- output ------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in CSV_COLUMNS])
    return buf.getvalue()


def seeds_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SEED_COLUMNS)
    for i, r in enumerate(rows):
        for vals in r.get("_seeds", ()):
            w.writerow([i] + [_fmt(v) for v in vals])
    return buf.getvalue()


def write_outputs(exp: Experiment, rows: list[dict], csv_path: Path | None = None) -> tuple[Path, Path]:
    csv_path = Path(csv_path or exp.csv_path)
    stem = str(csv_path.with_suffix(""))
    manifest_path = exp.manifest_path if csv_path == exp.csv_path else Path(stem + ".manifest.json")
    seeds_path = Path(stem + ".seeds.csv")
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    data = rows_to_csv(rows)
    csv_path.write_text(data, encoding="utf-8", newline="")
    seeds_path.write_text(seeds_to_csv(rows), encoding="utf-8", newline="")
    manifest = {
        "format": "wanspec-manifest/1",
        "suite": exp.suite,
        "experiment_path": exp.source,
        "experiment_text": exp.text,
        "resolved": exp.resolved,
        "seed": exp.seed,
        "seeds": exp.seeds,
        "csv": str(csv_path),
        "csv_sha256": hashlib.sha256(data.encode()).hexdigest(),
        "seeds_csv": str(seeds_path),
        "seed_columns": SEED_COLUMNS,
        "columns": CSV_COLUMNS,
        "ratio_formulas": RATIO_FORMULAS,
        "rows": len(rows),
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return csv_path, manifest_path


def load_manifest(path) -> Experiment:
    """Rebuild the exact experiment a manifest records (seed included)."""
    m = json.loads(Path(path).read_text(encoding="utf-8"))
    if m.get("format") != "wanspec-manifest/1":
        raise ExperimentError("not a wanspec manifest", None, str(path))
    src = m.get("experiment_path")
    base_dir = Path(src).parent if src else Path(path).parent
    return parse_experiment(m["experiment_text"], src, m["seed"], base_dir)


def summary_table(rows: list[dict]) -> str:
    head = ("suite", "stage", "rtt_ms", "phi", "lat_ratio", "draft_ratio", "status")
    lines = [" ".join(f"{h:>12}" for h in head)]
    for r in rows:

        def num(key):
            v = r.get(key, "")
            return f"{v:.4f}" if isinstance(v, float) else str(v)

        lines.append(
            " ".join(
                f"{x:>12}"
                for x in (
                    r["suite"],
                    r["stage"][:12],
                    f"{r['rtt_ms']:g}",
                    num("phi"),
                    num("median_latency_ratio"),
                    num("median_ctrl_draft_ratio"),
                    r.get("status", "ok")[:12],
                )
            )
        )
    return "\n".join(lines)
