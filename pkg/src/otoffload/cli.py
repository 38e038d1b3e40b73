"""Command-line experiment runner.

    otoffload validate --scenario desk.yaml
    otoffload run --scenario desk.yaml --strategy cloud-edge --seed 7 --out runs.csv
    otoffload sweep --scenario desk.yaml --rates 0.1,0.5,1.0 --strategies cloud-edge,cloud --seeds 0,1 --out sweep.csv

Scenario files are flat YAML mappings. Any :class:`SimConfig` field may be
set, plus ``strategy``, ``rates``, ``strategies``, ``seeds``, ``out`` and
``jobs``. Missing keys keep their defaults (the reference testbed values);
unknown keys are rejected. ``$OTOFFLOAD_SCENARIO`` names the scenario used
when ``--scenario`` is not given.

Exit codes: 0 success, 1 I/O failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import yaml

from .model import ConfigurationError
from .simulator import SimConfig, SimMetrics, SweepRow, derive_seed, run, seed_means, sweep
from .strategies import STRATEGY_NAMES

ENV_SCENARIO = "OTOFFLOAD_SCENARIO"
EXIT_OK, EXIT_IO, EXIT_USAGE = 0, 1, 2

DEFAULT_RATES = tuple(round(0.1 * k, 1) for k in range(1, 21))
DEFAULT_SEEDS = (0, 1, 2, 3, 4)

CSV_COLUMNS = (
    "strategy",
    "seed",
    "arrival_rate",
    "avg_task_delay_s",
    "processing_rate",
    "peak_blocking_kb",
    "final_blocking_kb",
    "total_energy_j",
    "offload_success_rate",
    "ot_iterations_mean",
    "ot_fallback_count",
)
# CSV column -> SimMetrics field
METRIC_COLUMNS = {
    "avg_task_delay_s": "avg_task_delay",
    "processing_rate": "processing_rate",
    "peak_blocking_kb": "peak_blocking_queue",
    "final_blocking_kb": "final_blocking_queue",
    "total_energy_j": "total_energy",
    "offload_success_rate": "offload_success_rate",
    "ot_iterations_mean": "ot_iterations_mean",
    "ot_fallback_count": "ot_fallback_count",
}
SUMMARY_COLUMNS = ("arrival_rate", "strategy", "n_seeds") + tuple(METRIC_COLUMNS)


class ScenarioError(ConfigurationError):
    """A scenario file could not be parsed or validated."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None) -> None:
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{where}", key)
        self.line = line


@dataclass(frozen=True)
class ScenarioFile:
    sim: SimConfig = SimConfig()
    strategy: str = "cloud-edge"
    rates: tuple[float, ...] = DEFAULT_RATES
    strategies: tuple[str, ...] = STRATEGY_NAMES
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    out: str | None = None
    jobs: int = 1


_SIM_FIELDS = {f.name: f for f in dataclasses.fields(SimConfig)}
_SIM_HINTS = typing.get_type_hints(SimConfig)
_EXTRA_KEYS = {"strategy", "rates", "strategies", "seeds", "out", "jobs", "data_size_range"}


def _key_lines(text: str) -> dict[str, int]:
    node = yaml.compose(text)
    if node is None:
        return {}
    if not isinstance(node, yaml.MappingNode):
        raise ScenarioError("scenario must be a mapping of key: value pairs", line=node.start_mark.line + 1)
    return {k.value: k.start_mark.line + 1 for k, _ in node.value}


def _coerce(name: str, value: Any, line: int | None) -> Any:
    hint = _SIM_HINTS[name]
    args = typing.get_args(hint)
    if value is None:
        if type(None) in args:
            return None
        raise ScenarioError(f"{name}: a value is required", name, line)
    if name == "capacity_horizon" and value == "auto":
        return value
    target = hint if not args else next(a for a in args if a not in (type(None), str))
    if target is bool or isinstance(value, bool):
        raise ScenarioError(f"{name}: expected a number, got {value!r}", name, line)
    try:
        if target is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if target is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ScenarioError(f"{name}: cannot read {value!r} as {target.__name__}", name, line) from None


def _list(name: str, value: Any, kind: type, line: int | None) -> tuple:
    if isinstance(value, (str, int, float)) and not isinstance(value, bool):
        value = [value] if kind is not str else [v.strip() for v in str(value).split(",")]
    if not isinstance(value, list) or not value:
        raise ScenarioError(f"{name}: expected a nonempty list", name, line)
    try:
        return tuple(kind(v) for v in value)
    except (TypeError, ValueError):
        raise ScenarioError(f"{name}: entries must be {kind.__name__}", name, line) from None


def parse_scenario(text: str) -> ScenarioFile:
    try:
        lines = _key_lines(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ScenarioError(f"parse error: {exc}", line=mark.line + 1 if mark else None) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a mapping of key: value pairs")

    sim_values: dict[str, Any] = {}
    extra: dict[str, Any] = {}
    for key, value in data.items():
        line = lines.get(key)
        if key in _SIM_FIELDS:
            sim_values[key] = _coerce(key, value, line)
        elif key == "data_size_range":
            if not isinstance(value, list) or len(value) != 2:
                raise ScenarioError("data_size_range: expected [min, max]", key, line)
            lo, hi = _list(key, value, int, line)
            sim_values["data_size_min"], sim_values["data_size_max"] = lo, hi
        elif key in _EXTRA_KEYS:
            extra[key] = value
        else:
            raise ScenarioError(f"unknown key {key!r}", key, line)

    try:
        sim = SimConfig(**sim_values)
    except ConfigurationError as exc:
        raise ScenarioError(str(exc), exc.key, lines.get(exc.key)) from None

    fields: dict[str, Any] = {"sim": sim}
    if "strategy" in extra:
        fields["strategy"] = _check_strategies([str(extra["strategy"])], lines.get("strategy"))[0]
    if "strategies" in extra:
        names = _list("strategies", extra["strategies"], str, lines.get("strategies"))
        fields["strategies"] = _check_strategies(names, lines.get("strategies"))
    if "rates" in extra:
        rates = _list("rates", extra["rates"], float, lines.get("rates"))
        if any(r < 0 for r in rates):
            raise ScenarioError("rates: arrival rates must be >= 0", "rates", lines.get("rates"))
        fields["rates"] = rates
    if "seeds" in extra:
        fields["seeds"] = _list("seeds", extra["seeds"], int, lines.get("seeds"))
    if "out" in extra:
        fields["out"] = None if extra["out"] is None else str(extra["out"])
    if "jobs" in extra:
        jobs = extra["jobs"]
        if isinstance(jobs, bool) or not isinstance(jobs, int) or jobs < 1:
            raise ScenarioError("jobs: expected an integer >= 1", "jobs", lines.get("jobs"))
        fields["jobs"] = jobs
    return ScenarioFile(**fields)


def _check_strategies(names: Sequence[str], line: int | None = None) -> tuple[str, ...]:
    bad = [n for n in names if n not in STRATEGY_NAMES]
    if bad:
        raise ScenarioError(
            f"unknown strategy {bad[0]!r}; valid names: {', '.join(STRATEGY_NAMES)}", "strategy", line
        )
    return tuple(names)


def load_scenario(path: str | os.PathLike) -> ScenarioFile:
    return parse_scenario(Path(path).read_text(encoding="utf-8"))


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)


def metrics_row(strategy: str, seed: int, rate: float, m: SimMetrics) -> list[str]:
    row = [strategy, str(seed), _fmt(float(rate))]
    row += [_fmt(getattr(m, field)) for field in METRIC_COLUMNS.values()]
    return row


def summary_rows(rows: Sequence[SweepRow]) -> list[list[str]]:
    means = seed_means(rows)
    counts: dict[tuple[float, str], int] = {}
    for r in rows:
        counts[(r.arrival_rate, r.strategy)] = counts.get((r.arrival_rate, r.strategy), 0) + 1
    out = []
    for (rate, strategy), vals in means.items():
        out.append(
            [_fmt(float(rate)), strategy, str(counts[(rate, strategy)])]
            + [_fmt(float(vals[f])) for f in METRIC_COLUMNS.values()]
        )
    return out


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[str]], append: bool) -> None:
    new = not append or not path.exists() or path.stat().st_size == 0
    with path.open("a" if append else "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(header)
        writer.writerows(rows)


def summary_path(out: Path) -> Path:
    return out.with_name(f"{out.stem}_summary{out.suffix or '.csv'}")


def _resolve_scenario(arg: str | None) -> ScenarioFile:
    path = arg or os.environ.get(ENV_SCENARIO)
    return load_scenario(path) if path else ScenarioFile()


def _split(text: str, kind: type) -> tuple:
    try:
        values = tuple(kind(v.strip()) for v in text.split(",") if v.strip())
    except ValueError:
        raise ScenarioError(f"cannot parse {text!r} as a comma-separated list of {kind.__name__}") from None
    if not values:
        raise ScenarioError("empty list")
    return values


def cmd_validate(args: argparse.Namespace) -> int:
    scenario = _resolve_scenario(args.scenario)
    print(f"ok: {scenario.sim.num_devices} devices, {scenario.sim.num_edges} edges, "
          f"{scenario.sim.num_slots} slots, strategy {scenario.strategy}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    scenario = _resolve_scenario(args.scenario)
    strategy = _check_strategies([args.strategy or scenario.strategy])[0]
    seed = scenario.seeds[0] if args.seed is None else args.seed
    cfg = scenario.sim.replace(seed=derive_seed(scenario.sim.seed, seed))
    m = run(cfg, strategy)
    row = metrics_row(strategy, seed, cfg.arrival_rate, m)
    out = args.out or scenario.out
    if out:
        _write_csv(Path(out), CSV_COLUMNS, [row], append=True)
        summary_stream = sys.stdout
    else:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        writer.writerow(row)
        summary_stream = sys.stderr
    print(
        f"{strategy} seed={seed} rate={cfg.arrival_rate:g}: delay={m.avg_task_delay * 1000:.3f} ms, "
        f"rate={m.processing_rate:.3f} tasks/slot, final queue={m.final_blocking_queue:.1f} kb, "
        f"energy={m.total_energy:.3f} J, success={m.offload_success_rate:.3f}",
        file=summary_stream,
    )
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    scenario = _resolve_scenario(args.scenario)
    rates = _split(args.rates, float) if args.rates else scenario.rates
    if any(r < 0 for r in rates):
        raise ScenarioError("arrival rates must be >= 0", "rates")
    strategies = _check_strategies(_split(args.strategies, str)) if args.strategies else scenario.strategies
    seeds = _split(args.seeds, int) if args.seeds else scenario.seeds
    jobs = args.jobs or scenario.jobs
    out = Path(args.out or scenario.out or "sweep.csv")

    rows = sweep(scenario.sim, rates, strategies, seeds, jobs=jobs)
    detail = [metrics_row(r.strategy, r.seed, r.arrival_rate, r.metrics) for r in rows]
    _write_csv(out, CSV_COLUMNS, detail, append=False)
    _write_csv(summary_path(out), SUMMARY_COLUMNS, summary_rows(rows), append=False)
    print(f"{len(detail)} runs -> {out}; seed means -> {summary_path(out)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="otoffload", description="Cloud-edge offloading simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help=f"YAML scenario file (default: ${ENV_SCENARIO} or built-in defaults)")

    p = sub.add_parser("validate", parents=[common], help="check a scenario file")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", parents=[common], help="simulate one configuration")
    p.add_argument("--strategy", help=f"one of: {', '.join(STRATEGY_NAMES)}")
    p.add_argument("--seed", type=int, help="replicate seed (default: first scenario seed)")
    p.add_argument("--out", help="CSV file to append to (default: stdout)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", parents=[common], help="grid over rates x strategies x seeds")
    p.add_argument("--rates", help="comma-separated arrival rates (tasks/slot/device)")
    p.add_argument("--strategies", help="comma-separated strategy names")
    p.add_argument("--seeds", help="comma-separated replicate seeds")
    p.add_argument("--out", help="detail CSV path; seed means go to <stem>_summary.csv")
    p.add_argument("--jobs", type=int, help="worker processes")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
