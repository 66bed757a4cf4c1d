"""Plain-text and JSON summary tables built from run artifacts.

A run directory holds ``config.cfg`` and ``eval.jsonl`` (written by the
``train-asr`` and ``eval`` commands); an ablation directory holds
``ablation.jsonl``.  Reports only aggregate and format those records.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as config_mod
from .train import REFERENCE_PLACEMENTS, scale_placement

SPLITS = ("test_clean", "test_other")


class ReportError(RuntimeError):
    pass


@dataclass
class RunSummary:
    name: str
    alpha: float
    taps: tuple[int, ...]
    tier: str
    seed: int
    wer: dict[str, float] = field(default_factory=dict)
    depth: int = 8

    @property
    def variant(self) -> str:
        if self.alpha == 0:
            return "baseline"
        return f"LAIL a={self.alpha:g} L={','.join(map(str, self.taps))} lm={self.tier}"


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def collect_runs(root) -> list[RunSummary]:
    runs = []
    for d in sorted(p for p in Path(root).rglob("eval.jsonl")):
        run = d.parent
        if not (run / "config.cfg").exists():
            continue
        cfg = config_mod.load(run / "config.cfg")
        wer = {r["split"]: r["wer"] for r in read_jsonl(d) if r.get("kind") == "eval" and r["decode_mode"] == "greedy"}
        runs.append(RunSummary(str(run.relative_to(root)) or ".", cfg.lail.alpha, cfg.lail.tap_layers,
                               cfg.lm.tier, cfg.train.seed, wer, cfg.encoder.num_layers))
    return runs


def _stats(values: list[float]) -> tuple[float, float, int]:
    if not values:
        return float("nan"), float("nan"), 0
    return float(np.mean(values)), float(np.std(values)), len(values)


def _cell(mean: float, std: float, n: int) -> str:
    if n == 0:
        return "-"
    return f"{mean:.2f}" if n == 1 else f"{mean:.2f}+-{std:.2f}"


def _render(title: str, header: list[str], rows: list[list[str]], notes=()) -> str:
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    line = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    rule = "-" * len(line(header))
    out = [title, *notes, rule, line(header), rule, *map(line, rows), rule]
    return "\n".join(out) + "\n"


def main_table(runs: list[RunSummary]) -> tuple[str, dict]:
    """Rows = splits, columns = baseline and each LAIL variant (mean over seeds)."""
    variants: dict[str, list[RunSummary]] = {}
    for r in runs:
        variants.setdefault(r.variant, []).append(r)
    order = sorted(variants, key=lambda v: (v != "baseline", v))
    data = {v: {s: _stats([r.wer[s] for r in variants[v] if s in r.wer]) for s in SPLITS} for v in order}
    rows = [[s] + [_cell(*data[v][s]) for v in order] for s in SPLITS]
    notes = [f"seeds: " + "; ".join(f"{v}={sorted(r.seed for r in variants[v])}" for v in order)]
    machine = {v: {s: {"mean": m, "std": sd, "n": n} for s, (m, sd, n) in data[v].items()} for v in order}
    return _render("WER (%) baseline vs LAIL, greedy decoding", ["split"] + order, rows, notes), machine


def _group_table(title: str, records: list[dict], group: str, notes=()) -> tuple[str, dict]:
    cells: dict[str, list[dict]] = {}
    for r in records:
        if r["group"] == group:
            cells.setdefault(r["cell"], []).append(r)
    rows, machine = [], {}
    for name, recs in cells.items():
        ok = [r for r in recs if not r.get("error")]
        stats = {s: _stats([r["wer"][s] for r in ok]) for s in SPLITS}
        taps = recs[0].get("taps", [])
        rows.append([name, ",".join(map(str, taps))] + [_cell(*stats[s]) for s in SPLITS] + [str(len(ok))])
        machine[name] = {"taps": taps, "lm_tier": recs[0].get("lm_tier"), "alpha": recs[0].get("alpha"),
                         "seeds": len(ok), "failed": len(recs) - len(ok),
                         **{s: {"mean": m, "std": sd, "n": n} for s, (m, sd, n) in stats.items()}}
    return _render(title, ["config", "taps"] + list(SPLITS) + ["seeds"], rows, notes), machine


def placement_mapping_note(desk_depth: int = 8) -> str:
    parts = [f"{{{','.join(map(str, v))}}}->{{{','.join(map(str, scale_placement(v, desk_depth=desk_depth)))}}}"
             for v in REFERENCE_PLACEMENTS.values()]
    return f"placement mapping (24-block -> {desk_depth}-layer): " + " ".join(parts)


def emit_report(root, out_dir=None) -> dict:
    """Write ``report.txt`` and ``report.json`` under ``out_dir`` (default ``root``)."""
    root = Path(root)
    if not root.is_dir():
        raise ReportError(f"report: no runs found ({root} is not a directory)")
    runs = collect_runs(root)
    abl_files = sorted(root.rglob("ablation.jsonl"))
    records = [r for p in abl_files for r in read_jsonl(p) if r.get("kind") == "cell"]
    if not runs and not records:
        raise ReportError(f"report: no runs found under {root}")
    depths = [r.get("desk_depth", 8) for r in records] + [r.depth for r in runs]
    depth = max(depths)
    text, machine, missing = [placement_mapping_note(depth) + "\n"], {"desk_depth": depth}, []
    if runs:
        t, m = main_table(runs)
        text.append(t)
        machine["main"] = m
        if not any(r.alpha == 0 for r in runs):
            missing.append("baseline (alpha=0) run")
        if not any(r.alpha > 0 for r in runs):
            missing.append("LAIL (alpha>0) run")
        for r in runs:
            missing += [f"{r.name}: eval on {s}" for s in SPLITS if s not in r.wer]
    if records:
        for key, title, group, notes in [
            ("placement", "WER (%) by connector placement", "placement", []),
            ("lm_size", "WER (%) by LM size", "lm_size", []),
            ("alpha", "Alpha sweep: WER (%) by interpolation weight", "alpha", [])]:
            if any(r["group"] == group for r in records):
                t, m = _group_table(title, records, group, notes)
                text.append(t)
                machine[key] = m
        missing += [f"{r['cell']} seed {r['seed']}: {r['error']}" for r in records if r.get("error")]
    if missing:
        text.append("missing or failed runs:\n" + "".join(f"  {m}\n" for m in missing))
    machine["missing"] = missing
    out = Path(out_dir) if out_dir else root
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text("\n".join(text), encoding="utf-8")
    (out / "report.json").write_text(json.dumps(machine, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return machine
