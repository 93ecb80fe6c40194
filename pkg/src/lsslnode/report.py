"""Result rows, the markdown summary, and the directional ordering checks over a grid."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evaluation import GroupNormStats, MetricsReport

__all__ = [
    "RESULT_FIELDS",
    "GRID_ROWS",
    "COSINE_MODES",
    "OrderingCheck",
    "report_rows",
    "norm_rows",
    "write_results",
    "read_results",
    "metric_table",
    "check_orderings",
    "render_summary",
]

RESULT_FIELDS = ("mode", "lambda_dir", "lambda_recon", "node", "task", "metric", "value", "seed", "config_hash")
GRID_ROWS = ("scratch", "AE", "AE_NODE", "LSSL", "LSSL_NODE", "S_LSSL", "S_LSSL_NODE")
COSINE_MODES = ("LSSL", "LSSL_NODE", "S_LSSL", "S_LSSL_NODE")
LABELS = {
    "scratch": "From scratch",
    "AE": "AE",
    "AE_NODE": "AE+NODE",
    "LSSL": "LSSL",
    "LSSL_NODE": "LSSL+NODE",
    "S_LSSL": "S-LSSL",
    "S_LSSL_NODE": "S-LSSL+NODE",
}
AUC_GAP = 0.02
MSE_MARGIN = 0.10
P_SEPARATES = 0.01
P_FAILS = 0.05


def _cell(mode: str, lam_dir: float, lam_recon: float, node: bool, seed: int, config_hash: str) -> dict:
    return {"mode": mode, "lambda_dir": lam_dir, "lambda_recon": lam_recon, "node": int(node), "seed": seed,
            "config_hash": config_hash}


def report_rows(rep: MetricsReport, lam_dir: float, lam_recon: float, node: bool, config_hash: str) -> list[dict]:
    base = _cell(rep.mode, lam_dir, lam_recon, node, rep.seed, config_hash)
    return [dict(base, task=rep.task, metric=k, value=float(v)) for k, v in rep.metrics.items()]


def norm_rows(mode: str, result: dict[str, tuple[GroupNormStats, GroupNormStats]], lam_dir: float,
              lam_recon: float, node: bool, seed: int, config_hash: str) -> list[dict]:
    base = _cell(mode, lam_dir, lam_recon, node, seed, config_hash)
    rows = []
    for kind, (fast, slow) in result.items():
        for g in (fast, slow):
            rows.append(dict(base, task="norms", metric=f"{kind}_{g.group}_mean", value=g.mean))
            rows.append(dict(base, task="norms", metric=f"{kind}_{g.group}_std", value=g.std))
            rows.append(dict(base, task="norms", metric=f"{kind}_{g.group}_n", value=float(g.n)))
        rows.append(dict(base, task="norms", metric=f"{kind}_t", value=fast.t))
        rows.append(dict(base, task="norms", metric=f"{kind}_p", value=fast.p_value))
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results(path: str | Path, rows: list[dict], append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists() or path.stat().st_size == 0
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(RESULT_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in RESULT_FIELDS])


def read_results(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["value"] = float(r["value"])
        r["seed"] = int(r["seed"])
        r["node"] = int(r["node"])
        r["lambda_dir"] = float(r["lambda_dir"])
        r["lambda_recon"] = float(r["lambda_recon"])
    return rows


def metric_table(rows: list[dict], task: str, metric: str) -> dict[str, dict[int, float]]:
    """mode -> seed -> value."""
    out: dict[str, dict[int, float]] = {}
    for r in rows:
        if r["task"] == task and r["metric"] == metric:
            out.setdefault(r["mode"], {})[r["seed"]] = r["value"]
    return out


def _mean(table: dict[str, dict[int, float]], mode: str) -> float:
    vals = list(table.get(mode, {}).values())
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class OrderingCheck:
    name: str
    passed: bool
    detail: str


def check_next_visit(rows: list[dict]) -> OrderingCheck:
    t = metric_table(rows, "next_visit", "auc_severe+")
    m = {k: _mean(t, k) for k in ("LSSL_NODE", "LSSL", "scratch", "AE")}
    gaps = {
        "LSSL_NODE-LSSL": m["LSSL_NODE"] - m["LSSL"],
        "LSSL-scratch": m["LSSL"] - m["scratch"],
        "LSSL-AE": m["LSSL"] - m["AE"],
        "LSSL_NODE-AE": m["LSSL_NODE"] - m["AE"],
    }
    passed = all(g > AUC_GAP for g in gaps.values())
    detail = "mean AUC Severe+ " + " ".join(f"{k}={v:.4f}" for k, v in m.items())
    detail += " | gaps " + " ".join(f"{k}={v:+.4f}" for k, v in gaps.items())
    return OrderingCheck("next-visit AUC Severe+ ordering", passed, detail)


def check_age(rows: list[dict]) -> OrderingCheck:
    t = metric_table(rows, "age", "mse")
    seeds = sorted(t.get("scratch", {}))
    parts, ok = [], True
    for mode in COSINE_MODES:
        wins = 0
        for s in seeds:
            ref = min(t["scratch"][s], t["AE"][s])
            wins += t.get(mode, {}).get(s, np.inf) <= (1.0 - MSE_MARGIN) * ref
        majority = wins * 2 > len(seeds)
        ok &= majority
        parts.append(f"{mode} {wins}/{len(seeds)}")
    ref_txt = " ".join(f"{k}={_mean(t, k):.2f}" for k in GRID_ROWS)
    return OrderingCheck("age MSE beats scratch and AE by 10%", ok and bool(seeds),
                         f"seed wins: {', '.join(parts)} | mean MSE {ref_txt}")


def norm_p(rows: list[dict], mode: str, seed: int) -> float:
    """The p-value that decides separation: the flow's displacement for NODE modes, else the encoder's."""
    node = mode.endswith("_NODE")
    t = metric_table(rows, "norms", "dz_node_p" if node else "dz_p")
    return t.get(mode, {}).get(seed, float("nan"))


def check_norms(rows: list[dict], seed: int = 0) -> OrderingCheck:
    ps = {m: norm_p(rows, m, seed) for m in GRID_ROWS[1:]}
    ok = all(ps[m] < P_SEPARATES for m in COSINE_MODES) and all(ps[m] > P_FAILS for m in ("AE", "AE_NODE"))
    plain = metric_table(rows, "norms", "dz_p")
    detail = " ".join(f"{m}={p:.3g}" for m, p in ps.items())
    detail += " | plain-dz p for NODE modes: " + " ".join(
        f"{m}={plain.get(m, {}).get(seed, float('nan')):.3g}" for m in ("AE_NODE", "LSSL_NODE", "S_LSSL_NODE"))
    return OrderingCheck(f"trajectory-norm separation (seed {seed})", ok, detail)


def check_node_cls(rows: list[dict]) -> OrderingCheck:
    t = metric_table(rows, "node_cls", "auc_severe+")
    m = {k: _mean(t, k) for k in ("S_LSSL_NODE", "LSSL_NODE", "scratch")}
    gaps = {k: m[k] - m["scratch"] for k in ("S_LSSL_NODE", "LSSL_NODE")}
    passed = all(g > AUC_GAP for g in gaps.values())
    detail = " ".join(f"{k}={v:.4f}" for k, v in m.items()) + " | gaps " + " ".join(
        f"{k}={v:+.4f}" for k, v in gaps.items())
    return OrderingCheck("NODE-CLS AUC Severe+ beats scratch", passed, detail)


def check_orderings(rows: list[dict]) -> list[OrderingCheck]:
    seeds = sorted({r["seed"] for r in rows})
    return [check_next_visit(rows), check_age(rows), check_norms(rows, seeds[0] if seeds else 0),
            check_node_cls(rows)]


def _cell_text(table: dict[str, dict[int, float]], mode: str, digits: int) -> str:
    vals = list(table.get(mode, {}).values())
    if not vals:
        return "-"
    if len(vals) == 1:
        return f"{vals[0]:.{digits}f}"
    return f"{np.mean(vals):.{digits}f} ± {np.std(vals, ddof=1):.{digits}f}"


def render_summary(rows: list[dict]) -> str:
    seeds = sorted({r["seed"] for r in rows})
    out = io.StringIO()
    out.write(f"# Synthetic-cohort results (seeds: {', '.join(map(str, seeds))})\n\n")

    out.write("## Age regression (test MSE, years²)\n\n| Weights | MSE |\n|---|---|\n")
    t = metric_table(rows, "age", "mse")
    for mode in GRID_ROWS:
        out.write(f"| {LABELS[mode]} | {_cell_text(t, mode, 2)} |\n")

    out.write("\n## Next-visit grade prediction (test AUC)\n\n")
    out.write("| Weights | Mild+ | Moderate+ | Severe+ |\n|---|---|---|---|\n")
    tabs = [metric_table(rows, "next_visit", f"auc_{k}") for k in ("mild+", "moderate+", "severe+")]
    for mode in GRID_ROWS:
        out.write(f"| {LABELS[mode]} | " + " | ".join(_cell_text(tb, mode, 3) for tb in tabs) + " |\n")

    out.write("\n## Trajectory norms, fast vs slow progressors (one-sided Welch p)\n\n")
    out.write("| Weights | mean dz fast | mean dz slow | p (dz) | p (dz_node) |\n|---|---|---|---|---|\n")
    fm = metric_table(rows, "norms", "dz_fast_mean")
    sm = metric_table(rows, "norms", "dz_slow_mean")
    pp = metric_table(rows, "norms", "dz_p")
    pn = metric_table(rows, "norms", "dz_node_p")
    for mode in GRID_ROWS:
        out.write(f"| {LABELS[mode]} | {_cell_text(fm, mode, 3)} | {_cell_text(sm, mode, 3)} | "
                  f"{_cell_text(pp, mode, 4)} | {_cell_text(pn, mode, 4)} |\n")

    out.write("\n## NODE classifier (test AUC)\n\n| Weights | Mild+ | Moderate+ | Severe+ |\n|---|---|---|---|\n")
    tabs = [metric_table(rows, "node_cls", f"auc_{k}") for k in ("mild+", "moderate+", "severe+")]
    for mode in ("scratch", "AE_NODE", "LSSL_NODE", "S_LSSL_NODE"):
        out.write(f"| {LABELS[mode]} | " + " | ".join(_cell_text(tb, mode, 3) for tb in tabs) + " |\n")

    out.write("\n## Directional checks\n\n")
    for c in check_orderings(rows):
        out.write(f"- [{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}\n")
    return out.getvalue()
