"""Run reports: structured metrics plus rendered figures and delimited files.

``write_outputs`` drops everything a reviewer needs next to each other in the
output directory: report.json (full structured report), summary.csv and
balances.csv (flat delimited views), trace.jsonl (the canonical trace), and
two PNG figures — the bisection-round histogram and the balance movement per
account.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .trace import TraceLog


@dataclass
class RunReport:
    scenario_name: str
    seed: int
    requests_served: int = 0
    payments_settled: int = 0
    disputes: list = field(default_factory=list)
    bisection_rounds: list = field(default_factory=list)
    initial_balances: dict = field(default_factory=dict)
    final_balances: dict = field(default_factory=dict)
    conservation: list = field(default_factory=list)  # (label, total) per tick
    conservation_ok: bool = True
    solvency: list = field(default_factory=list)
    faults: list = field(default_factory=list)
    ownership_rulings: list = field(default_factory=list)
    trace_digest: str = ""

    def honest_dispute_record(self) -> dict:
        total = len(self.disputes)
        honest_wins = sum(1 for d in self.disputes if d["winner_honest"])
        return {"disputes": total, "won_by_honest": honest_wins}

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario_name,
            "seed": self.seed,
            "requests_served": self.requests_served,
            "payments_settled": self.payments_settled,
            "disputes": self.disputes,
            "dispute_summary": self.honest_dispute_record(),
            "bisection_rounds": self.bisection_rounds,
            "initial_balances": self.initial_balances,
            "final_balances": self.final_balances,
            "conservation": [{"label": label, "total": total} for label, total in self.conservation],
            "conservation_ok": self.conservation_ok,
            "solvency": self.solvency,
            "faults": self.faults,
            "ownership_rulings": self.ownership_rulings,
            "trace_digest": self.trace_digest,
        }


def _write_summary_csv(report: RunReport, path: str) -> None:
    summary = report.honest_dispute_record()
    rows = [
        ("scenario", report.scenario_name),
        ("seed", report.seed),
        ("requests_served", report.requests_served),
        ("payments_settled", report.payments_settled),
        ("disputes", summary["disputes"]),
        ("disputes_won_by_honest", summary["won_by_honest"]),
        ("faults_injected", len(report.faults)),
        ("conservation_ok", report.conservation_ok),
        ("trace_digest", report.trace_digest),
    ]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerows(rows)


def _write_balances_csv(report: RunReport, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["account", "initial", "final", "delta"])
        for account in sorted(report.initial_balances):
            initial = report.initial_balances[account]
            final = report.final_balances.get(account, 0)
            writer.writerow([account, initial, final, final - initial])


def _figure_rounds(report: RunReport, path: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    if report.bisection_rounds:
        lo, hi = min(report.bisection_rounds), max(report.bisection_rounds)
        counts = {r: report.bisection_rounds.count(r) for r in range(lo, hi + 1)}
        ax.bar(list(counts.keys()), list(counts.values()), color="#4878a8")
        ax.set_xticks(list(counts.keys()))
    else:
        ax.text(0.5, 0.5, "no bisection disputes", ha="center", va="center", transform=ax.transAxes)
    ax.set_xlabel("query rounds to isolate the divergent node")
    ax.set_ylabel("disputes")
    ax.set_title(f"bisection rounds: {report.scenario_name}")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _figure_balances(report: RunReport, path: str) -> None:
    accounts = sorted(report.initial_balances)
    initial = [report.initial_balances[a] for a in accounts]
    final = [report.final_balances.get(a, 0) for a in accounts]
    pos = range(len(accounts))
    fig, ax = plt.subplots(figsize=(7, max(3, 0.5 * len(accounts) + 1)))
    ax.barh([p + 0.2 for p in pos], initial, height=0.35, label="initial", color="#b0b0b0")
    ax.barh([p - 0.2 for p in pos], final, height=0.35, label="final", color="#4878a8")
    ax.set_yticks(list(pos))
    ax.set_yticklabels(accounts)
    ax.invert_yaxis()
    ax.set_xlabel("tokens")
    ax.set_title(f"account balances: {report.scenario_name}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def write_outputs(report: RunReport, trace: TraceLog, out_dir: str) -> dict:
    """Write report.json, the CSVs, the trace, and the figures; return paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "report": os.path.join(out_dir, "report.json"),
        "summary": os.path.join(out_dir, "summary.csv"),
        "balances": os.path.join(out_dir, "balances.csv"),
        "trace": os.path.join(out_dir, "trace.jsonl"),
        "rounds_figure": os.path.join(out_dir, "bisection_rounds.png"),
        "balances_figure": os.path.join(out_dir, "balances.png"),
    }
    with open(paths["report"], "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_summary_csv(report, paths["summary"])
    _write_balances_csv(report, paths["balances"])
    trace.write_jsonl(paths["trace"])
    _figure_rounds(report, paths["rounds_figure"])
    _figure_balances(report, paths["balances_figure"])
    return paths
