"""Resolution sweeps, Pareto filtering, and plot-ready table output.

A sweep spec is a small INI file:

    [sweep]
    base = piip-tsb-toy            ; preset name or path to a config file
    resolutions.1 = 32:97:32       ; start:stop:step (stop exclusive), or
    resolutions.2 = 64, 128        ; an explicit comma list
    resolutions.3 = 128:257:64
    budget_gflops = 2.5            ; optional

Tables are lists of ordered dicts. CSV output uses RFC-4180 quoting with
one column per key; list-valued cells (branch resolutions) are rendered
``128x256x512`` so they stay unquoted and re-parse exactly. The structured
format is JSON with a ``schema`` tag and is validated by the shipped
``schemas/sweep.json``.
"""

from __future__ import annotations

import configparser
import csv
import io
import itertools
import json
import re
from dataclasses import dataclass, replace

from .config import (
    ParseError,
    PyramidConfig,
    ValidationError,
    load_config,
    preset,
    PRESET_NAMES,
)
from .costmodel import cost_report

SCHEMA_ID = "piip-sweep-table/1"

Row = dict[str, object]


# ---------------------------------------------------------------------------
# sweep spec
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepSpec:
    base: PyramidConfig
    resolutions: tuple[tuple[int, ...], ...]  # candidates per branch
    budget_gflops: float | None = None


def _parse_candidates(raw: str, where: str) -> tuple[int, ...]:
    raw = raw.strip()
    if ":" in raw:
        parts = raw.split(":")
        if len(parts) != 3:
            raise ParseError(f"{where}: range must be start:stop:step, got {raw!r}")
        try:
            start, stop, step = (int(p) for p in parts)
        except ValueError:
            raise ParseError(f"{where}: range must be integer start:stop:step, got {raw!r}")
        if step <= 0:
            raise ParseError(f"{where}: range step must be positive, got {step}")
        values = tuple(range(start, stop, step))
    else:
        try:
            values = tuple(int(p) for p in raw.split(","))
        except ValueError:
            raise ParseError(f"{where}: expected a comma list of integers, got {raw!r}")
    if not values:
        raise ParseError(f"{where}: empty resolution range {raw!r}")
    return values


def resolve_base(name_or_path: str) -> PyramidConfig:
    if name_or_path in PRESET_NAMES:
        return preset(name_or_path)
    return load_config(name_or_path)


def parse_sweep_spec(text: str) -> SweepSpec:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ParseError(f"bad sweep spec: {exc}") from exc
    if parser.sections() != ["sweep"]:
        raise ParseError(
            f"sweep spec needs exactly one [sweep] section, got {parser.sections()}"
        )
    section = parser["sweep"]
    known = {"base", "budget_gflops"}
    base = None
    budget = None
    per_branch: dict[int, tuple[int, ...]] = {}
    for key, raw in section.items():
        if key == "base":
            base = resolve_base(raw.strip())
        elif key == "budget_gflops":
            budget = float(raw)
        elif key.startswith("resolutions."):
            per_branch[int(key.split(".", 1)[1])] = _parse_candidates(raw, f"sweep: {key}")
        else:
            raise ParseError(f"sweep: unknown key {key!r} (expected "
                             f"{sorted(known)} or resolutions.<branch>)")
    if base is None:
        raise ParseError("sweep: missing required key 'base'")
    n = len(base.branches)
    for idx in per_branch:
        if not 1 <= idx <= n:
            raise ParseError(f"sweep: resolutions.{idx} out of range for {n} branches")
    candidates = []
    for j, branch in enumerate(base.branches, start=1):
        values = per_branch.get(j, (branch.resolution,))
        for r in values:
            if r <= 0 or r % branch.patch_size != 0:
                raise ValidationError(
                    f"sweep: resolutions.{j} candidate {r} not divisible by "
                    f"branch {j} patch_size {branch.patch_size}"
                )
        candidates.append(values)
    return SweepSpec(base=base, resolutions=tuple(candidates), budget_gflops=budget)


def load_sweep_spec(path: str) -> SweepSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_sweep_spec(fh.read())


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def config_id(resolutions: tuple[int, ...]) -> str:
    return "r" + "-".join(str(r) for r in resolutions)


def sweep(spec: SweepSpec, budget_gflops: float | None = None) -> list[Row]:
    """Exhaustive resolution grid; rows that break pyramid ordering are dropped.

    A combination is kept only when resolutions are non-decreasing with the
    branch index, preserving the narrower-branch-sees-more-pixels layout.
    Rows over budget are flagged via ``within_budget``, never dropped.
    """
    budget = spec.budget_gflops if budget_gflops is None else budget_gflops
    rows: list[Row] = []
    for combo in itertools.product(*spec.resolutions):
        if any(combo[i] > combo[i + 1] for i in range(len(combo) - 1)):
            continue
        branches = tuple(
            replace(b, resolution=r) for b, r in zip(spec.base.branches, combo)
        )
        cfg = replace(spec.base, branches=branches)
        report = cost_report(cfg)
        flops = report.total_flops
        rows.append(
            {
                "config_id": config_id(combo),
                "resolutions": list(combo),
                "params": report.total_params,
                "flops": flops,
                "within_budget": True if budget is None else flops <= budget * 1e9,
            }
        )
    if not rows:
        raise ValidationError("sweep produced no rows: every combination broke "
                              "the resolution ordering")
    return rows


# ---------------------------------------------------------------------------
# pareto
# ---------------------------------------------------------------------------


def _column(rows: list[Row], col: str) -> list[float]:
    values = []
    for i, row in enumerate(rows):
        if col not in row:
            raise ValueError(f"column {col!r} missing from table row {i}")
        values.append(float(row[col]))  # type: ignore[arg-type]
    return values


def pareto_front(rows: list[Row], cost_col: str, quality_col: str) -> list[Row]:
    """Rows not dominated in (lower cost, higher quality), sorted by cost.

    Single sort-and-scan pass: walking equal-cost groups in ascending cost,
    a group's quality maximum must beat everything strictly cheaper, and
    only rows achieving the group maximum survive.
    """
    cost = _column(rows, cost_col)
    quality = _column(rows, quality_col)
    order = sorted(range(len(rows)), key=lambda i: cost[i])
    kept: list[int] = []
    best_cheaper = float("-inf")
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and cost[order[j]] == cost[order[i]]:
            j += 1
        group = order[i:j]
        group_max = max(quality[k] for k in group)
        if group_max > best_cheaper:
            kept.extend(k for k in group if quality[k] == group_max)
        best_cheaper = max(best_cheaper, group_max)
        i = j
    return [rows[k] for k in kept]


# ---------------------------------------------------------------------------
# table emit / parse
# ---------------------------------------------------------------------------

_RES_LIST = re.compile(r"^\d+(x\d+)+$")
_INT = re.compile(r"^-?\d+$")


def _format_cell(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return "x".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_cell(text: str) -> object:
    if text == "true":
        return True
    if text == "false":
        return False
    if _INT.match(text):
        return int(text)
    if _RES_LIST.match(text):
        return [int(p) for p in text.split("x")]
    try:
        return float(text)
    except ValueError:
        return text


def render_csv(rows: list[Row], columns: list[str] | None = None) -> str:
    if columns is None:
        columns = list(rows[0]) if rows else []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_format_cell(row[c]) for c in columns])
    return buf.getvalue()


def parse_table(text: str) -> list[Row]:
    reader = csv.reader(io.StringIO(text))
    table = list(reader)
    if not table:
        raise ValueError("empty table: no header row")
    header = table[0]
    return [
        {col: _parse_cell(cell) for col, cell in zip(header, line)} for line in table[1:]
    ]


def render_json(rows: list[Row]) -> str:
    return json.dumps({"schema": SCHEMA_ID, "rows": rows}, indent=2) + "\n"


def emit(rows: list[Row], path: str) -> None:
    """Write a table; ``.json`` gets the structured format, anything else CSV."""
    text = render_json(rows) if path.endswith(".json") else render_csv(rows)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


__all__ = [
    "SCHEMA_ID",
    "SweepSpec",
    "config_id",
    "emit",
    "load_sweep_spec",
    "pareto_front",
    "parse_sweep_spec",
    "parse_table",
    "render_csv",
    "render_json",
    "resolve_base",
    "sweep",
]
