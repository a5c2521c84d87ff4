"""Command line entry point: ``train``, ``eval`` and ``compare``."""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .config import ConfigError, ScenarioConfig, load_config
from .core import MOVEMENTS
from .env import Episode
from .observe import final_waits, obs_sizes
from .policy import DivergenceError, PolicyParams, load_checkpoint, save_checkpoint
from .ppo import TRAINING_COLUMNS, UpdateRecord, train

log = logging.getLogger("mixtraffic")

METRIC_COLUMNS = ("time", "reward", "avg_queue", "unregulated_ratio")
REPORT_COLUMNS = (
    "controller", "seed", "config_hash", "avg_waiting_time", "vehicles_measured", "throughput",
    "hold_events", "mean_unregulated_ratio", "time_to_50pct_regulated", "gridlock", "gridlock_time",
    *(f"wait_{m.label}" for m in MOVEMENTS),
)
EXIT_GRIDLOCK = 3


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return f"{x + 0.0:.6f}"
    return str(x)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Sequence], config_hash: str) -> Path:
    """CSV with a ``# config_hash=...`` provenance line above the header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# config_hash={config_hash}", ",".join(columns)]
    lines.extend(",".join(_fmt(x) for x in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_csv(path: Path) -> Tuple[Dict[str, str], List[Dict[str, str]]]:
    """Inverse of :func:`write_csv`: (comment key/values, rows)."""
    meta, rows, header = {}, [], None
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            for item in line[1:].split():
                k, _, v = item.partition("=")
                meta[k] = v
        elif header is None:
            header = line.split(",")
        elif line:
            rows.append(dict(zip(header, line.split(","))))
    return meta, rows


# -- eval ----------------------------------------------------------------------------


@dataclass
class RunReport:
    controller: str
    seed: int
    config_hash: str
    avg_waiting_time: float
    vehicles_measured: int
    throughput: int
    hold_events: int
    mean_unregulated_ratio: float
    time_to_50pct_regulated: float
    gridlock: bool
    gridlock_time: float
    per_movement_wait: Dict[str, float] = field(default_factory=dict)
    unregulated_series: List[float] = field(default_factory=list)

    def row(self) -> Tuple:
        head = tuple(getattr(self, c) for c in REPORT_COLUMNS[:11])
        return head + tuple(self.per_movement_wait.get(m.label, 0.0) for m in MOVEMENTS)


def time_to_regulated(times: Sequence[float], ratios: Sequence[float], level: float = 0.5) -> float:
    """First time the unregulated ratio drops to ``level`` or below (inf if never)."""
    for t, r in zip(times, ratios):
        if r <= level + 1e-12:
            return float(t)
    return math.inf


def _load_params(cfg: ScenarioConfig) -> Optional[PolicyParams]:
    if cfg.controller not in ("hierarchical", "hl_only"):
        return None
    if cfg.checkpoint is None:
        raise ConfigError(f"controller {cfg.controller} needs [scenario] checkpoint")
    if not cfg.checkpoint.is_file():
        raise ConfigError(f"checkpoint {cfg.checkpoint} does not exist")
    params, _ = load_checkpoint(cfg.checkpoint)
    hi, lo = obs_sizes(cfg.scenario.n_cells)
    if params.high.sizes[0] != hi or params.low.sizes[0] != lo:
        raise ConfigError(f"checkpoint {cfg.checkpoint} does not match the observation size")
    return params


def simulate(cfg: ScenarioConfig, params: Optional[PolicyParams] = None, deterministic: bool = False) -> Tuple[Episode, RunReport]:
    if params is None:
        params = _load_params(cfg)
    ep = Episode(cfg.scenario, cfg.controller, params, deterministic=deterministic).run()
    st = ep.state
    waits = final_waits(st.event_log)
    by_movement: Dict[str, List[float]] = {m.label: [] for m in MOVEMENTS}
    movement_of = {e.vehicle_id: e.movement for e in st.event_log if e.event_type == "zone_enter"}
    for vid, w in waits.items():
        by_movement[movement_of[vid]].append(w)
    series = [m.unregulated_ratio for m in ep.metrics]
    times = [m.time for m in ep.metrics]
    report = RunReport(
        controller=cfg.controller,
        seed=cfg.scenario.seed,
        config_hash=cfg.config_hash,
        avg_waiting_time=float(np.mean(list(waits.values()))) if waits else 0.0,
        vehicles_measured=len(waits),
        throughput=st.departures,
        hold_events=sum(1 for e in st.event_log if e.event_type == "hold"),
        mean_unregulated_ratio=float(np.mean(series)) if series else 1.0,
        time_to_50pct_regulated=time_to_regulated(times, series),
        gridlock=ep.gridlock_time is not None,
        gridlock_time=ep.gridlock_time if ep.gridlock_time is not None else math.nan,
        per_movement_wait={k: (float(np.mean(v)) if v else 0.0) for k, v in by_movement.items()},
        unregulated_series=series,
    )
    return ep, report


def run_eval(cfg: ScenarioConfig, out: Optional[Path] = None, deterministic: bool = False) -> RunReport:
    """Simulate the configured horizon; write metrics.csv, report.csv and events.csv to ``out``."""
    ep, report = simulate(cfg, deterministic=deterministic)
    if report.vehicles_measured == 0:
        log.warning("no vehicle entered the control zone; average waiting time reported as 0")
    if out is not None:
        out = Path(out)
        write_csv(out / "metrics.csv", METRIC_COLUMNS,
                  ((m.time, m.reward, m.avg_queue, m.unregulated_ratio) for m in ep.metrics), cfg.config_hash)
        write_csv(out / "report.csv", REPORT_COLUMNS, [report.row()], cfg.config_hash)
        ep.state.export_events(out / "events.csv", comment=f"config_hash={cfg.config_hash}")
    return report


# -- train ---------------------------------------------------------------------------


def run_train(cfg: ScenarioConfig, out: Path) -> Path:
    """Train per the config's [train] section; returns the final checkpoint path."""
    if not cfg.has_train:
        raise ConfigError("training needs a [train] section")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tc = cfg.train
    seed = cfg.scenario.seed
    hi, lo = obs_sizes(cfg.scenario.n_cells)
    params = PolicyParams.init(hi, lo, tc.hidden, seed)
    records: List[UpdateRecord] = []

    def flush():
        write_csv(out / "training.csv", TRAINING_COLUMNS, (r.row() for r in records), cfg.config_hash)

    def on_update(rec: UpdateRecord, p: PolicyParams):
        records.append(rec)
        log.info("update %d [%s] reward %.4f wait %.2f kl %.4f", rec.update_idx, rec.stage,
                 rec.mean_reward, rec.mean_wait, rec.approx_kl)
        flush()
        if tc.checkpoint_every and (rec.update_idx + 1) % tc.checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint_{rec.update_idx + 1:05d}.npz", p, cfg.config_hash)

    params, _ = train(cfg.scenario, tc, params, seed, on_update)
    flush()
    return save_checkpoint(out / "final.npz", params, cfg.config_hash, {"updates": len(records)})


# -- compare -------------------------------------------------------------------------


def reduction(ours: float, baseline: float) -> float:
    """Relative change (ours - baseline) / baseline."""
    if baseline == 0:
        return 0.0 if ours == 0 else math.nan
    return (ours - baseline) / baseline


@dataclass
class Comparison:
    names: List[str]
    seeds: List[int]
    waits: np.ndarray  # (config, seed)
    matrix: np.ndarray  # median over seeds of reduction(row, column)
    mismatched: bool


def compare_waits(names: Sequence[str], waits: np.ndarray, seeds: Sequence[int], mismatched: bool = False) -> Comparison:
    waits = np.asarray(waits, dtype=float)
    n = len(names)
    matrix = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            matrix[i, j] = float(np.median([reduction(waits[i, k], waits[j, k]) for k in range(waits.shape[1])]))
    return Comparison(list(names), list(seeds), waits, matrix, mismatched)


def run_compare(cfgs: Sequence[ScenarioConfig], seeds: Sequence[int], out: Optional[Path] = None,
                deterministic: bool = False) -> Comparison:
    if len(cfgs) < 2:
        raise ConfigError("compare needs at least two configs")
    prints = {c.scenario_fingerprint() for c in cfgs}
    mismatched = len(prints) > 1
    if mismatched:
        log.warning("configs describe different scenarios; reductions compare unlike traffic")
    names = []
    for c in cfgs:
        base = c.path.stem if c.path else c.controller
        name = base
        k = 2
        while name in names:
            name = f"{base}_{k}"
            k += 1
        names.append(name)
    waits = np.zeros((len(cfgs), len(seeds)))
    for i, c in enumerate(cfgs):
        params = _load_params(c)
        for k, s in enumerate(seeds):
            _, rep = simulate(c.with_seed(s), params, deterministic)
            waits[i, k] = rep.avg_waiting_time
    comp = compare_waits(names, waits, seeds, mismatched)
    if out is not None:
        out = Path(out)
        joint = "+".join(c.config_hash for c in cfgs)
        write_csv(out / "compare.csv", ("config", "controller", "seed", "avg_waiting_time", "scenario_mismatch"),
                  ((names[i], cfgs[i].controller, s, waits[i, k], mismatched)
                   for i in range(len(cfgs)) for k, s in enumerate(seeds)), joint)
        write_csv(out / "reductions.csv", ("ours", *names),
                  ((names[i], *comp.matrix[i]) for i in range(len(names))), joint)
    return comp


# -- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixtraffic", description="Mixed-traffic intersection control.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="override the config's seed")
        sp.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")

    t = sub.add_parser("train", help="train the hierarchical controller")
    t.add_argument("config", type=Path)
    common(t)

    e = sub.add_parser("eval", help="evaluate one controller")
    e.add_argument("config", type=Path)
    common(e)
    e.add_argument("--strict", action="store_true", help="non-zero exit status on gridlock")
    e.add_argument("--deterministic-policy", action="store_true", help="act greedily instead of sampling")

    c = sub.add_parser("compare", help="compare controllers on common seeds")
    c.add_argument("configs", type=Path, nargs="+")
    common(c)
    c.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds per config")
    c.add_argument("--deterministic-policy", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "compare":
            cfgs = [load_config(p) for p in args.configs]
            first = args.seed if args.seed is not None else cfgs[0].scenario.seed
            seeds = list(range(first, first + args.seeds))
            comp = run_compare(cfgs, seeds, args.out, args.deterministic_policy)
            width = max(len(n) for n in comp.names)
            print("avg waiting time (median over seeds):")
            for n, row in zip(comp.names, comp.waits):
                print(f"  {n:<{width}}  {np.median(row):8.2f} s")
            print("reduction (row vs column):")
            for n, row in zip(comp.names, comp.matrix):
                print(f"  {n:<{width}}  " + "  ".join(f"{x:+7.1%}" for x in row))
            if comp.mismatched:
                print("warning: configs describe different scenarios", file=sys.stderr)
            return 0

        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.command == "train":
            path = run_train(cfg, args.out)
            print(path)
            return 0
        report = run_eval(cfg, args.out, args.deterministic_policy)
        print(f"avg_waiting_time={report.avg_waiting_time:.3f}s throughput={report.throughput} "
              f"gridlock={'true' if report.gridlock else 'false'}")
        if report.gridlock and args.strict:
            print(f"gridlock at t={report.gridlock_time:.1f}s", file=sys.stderr)
            return EXIT_GRIDLOCK
        return 0
    except (ConfigError, DivergenceError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
