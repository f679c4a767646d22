"""Ablations over the merge function, the final TD rate and the coherence
weight, all with the same seed so every run sees the same data."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

from .cell import ADDITION, PRODUCTION, TdSchedule
from .config import RunConfig, format_schedule, parse_schedule
from .runner import Trainer

log = logging.getLogger(__name__)

MERGES = (PRODUCTION, ADDITION)
TD_FINALS = (0.0, 0.2, 0.5, 0.8, 1.0)
LAMBDAS = (0.0, 0.8)

TABLE_HEADER = ("factor", "merge_kind", "td_final", "lam", "task_loss", "overlap_discrepancy",
                "accuracy", "exact_match", "mae")


@dataclass(frozen=True)
class Variant:
    merge_kind: str
    td_final: float
    lam: float

    def config(self, base: RunConfig) -> RunConfig:
        step = _schedule_step(base)
        sched = format_schedule(TdSchedule.decaying_to(self.td_final, step))
        return base.replace(merge_kind=self.merge_kind, td_schedule=sched, lam=self.lam)


def _schedule_step(base: RunConfig) -> int:
    ms = parse_schedule(base.td_schedule)
    return ms[1][0] if len(ms) > 1 else 2


def variants(base: RunConfig, full: bool = False) -> list[tuple[str, Variant]]:
    """One-factor-at-a-time rows around the base setting, or the full grid."""
    final = parse_schedule(base.td_schedule)[-1][1]
    if full:
        return [("grid", Variant(m, td, lam)) for m in MERGES for td in TD_FINALS for lam in LAMBDAS]
    rows = [("merge", Variant(m, final, base.lam)) for m in MERGES]
    rows += [("td_final", Variant(base.merge_kind, td, base.lam)) for td in TD_FINALS]
    rows += [("lam", Variant(base.merge_kind, final, lam)) for lam in LAMBDAS]
    return rows


def run_variant(cfg: RunConfig) -> dict:
    trainer = Trainer.fresh(cfg)
    row = {}
    while trainer.epoch < cfg.epochs:
        row, _ = trainer.run_epoch()
    return {
        "task_loss": row["task_loss"],
        "overlap_discrepancy": row["coherence_loss"],
        "accuracy": row.get("accuracy"),
        "exact_match": row.get("exact_match"),
        "mae": row.get("mae"),
    }


def run_ablation(base: RunConfig, out_dir=None, full: bool = False) -> list[dict]:
    """Train every variant and return the table rows.  Identical variants
    (e.g. the base setting appearing under several factors) run once."""
    cache: dict[Variant, dict] = {}
    table = []
    for factor, v in variants(base, full):
        if v not in cache:
            log.info("ablation run %s", v)
            cache[v] = run_variant(v.config(base))
        table.append({"factor": factor, "merge_kind": v.merge_kind, "td_final": v.td_final,
                      "lam": v.lam, **cache[v]})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TABLE_HEADER)
            for r in table:
                w.writerow(["" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k])
                            for k in TABLE_HEADER])
    return table


def format_table(table: list[dict]) -> str:
    lines = ["  ".join(f"{h:>19}" for h in TABLE_HEADER)]
    for r in table:
        cells = []
        for k in TABLE_HEADER:
            v = r.get(k)
            cells.append(f"{'-' if v is None else (f'{v:.4g}' if isinstance(v, float) else v):>19}")
        lines.append("  ".join(cells))
    return "\n".join(lines)
