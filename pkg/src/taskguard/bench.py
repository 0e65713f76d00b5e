"""Detection metrics, recovery statistics, and Table-style reports.

A detection flag is matched to an injected anomaly when it falls within
``window`` seconds after the injection (greedy one-to-one, in time order).
Precision/recall are reported micro (pooled counts) and macro (unweighted
per-skill mean). The recovery success rate counts injections that were
answered by a recovery and followed by eventual completion of the
anomalous node — it is reported separately from the harmonic-mean F1,
which is derived from the micro precision/recall.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

from .taskgraph import ExecutionTrace

DEFAULT_MATCH_WINDOW = 1.0  # s


@dataclass
class Confusion:
    """Detection counts, per skill plus pooled via :meth:`merged`."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    per_skill: dict = field(default_factory=dict)  # skill -> Confusion

    def __post_init__(self):
        for count in (self.tp, self.fp, self.fn, self.tn):
            if count < 0:
                raise ValueError("confusion counts must be non-negative")

    def _bump(self, skill, attr):
        if skill is not None:
            sub = self.per_skill.setdefault(skill, Confusion())
            setattr(sub, attr, getattr(sub, attr) + 1)
        setattr(self, attr, getattr(self, attr) + 1)

    def add(self, other: "Confusion"):
        for attr in ("tp", "fp", "fn", "tn"):
            setattr(self, attr, getattr(self, attr) + getattr(other, attr))
        for skill, sub in other.per_skill.items():
            mine = self.per_skill.setdefault(skill, Confusion())
            mine.add(sub)


def match_detections(trace, truth, window=DEFAULT_MATCH_WINDOW,
                     skill_of=None) -> Confusion:
    """Score one trace's anomaly flags against ground-truth injections.

    `truth` is a list of (t_injection, node_id, ...) records; extra tuple
    elements are ignored. `skill_of` maps node ids to skill labels for the
    per-skill breakdown (identity when omitted). True negatives are node
    executions that saw neither an injection nor a flag.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    skill_of = skill_of or (lambda node: node)
    conf = Confusion()
    flags = [(e.t_sim, e.node) for e in trace.of_kind("anomaly_flagged")]
    injections = sorted((rec[0], rec[1]) for rec in truth)
    used = [False] * len(flags)
    for t_inj, node in injections:
        hit = None
        for i, (t_flag, _fnode) in enumerate(flags):
            if used[i]:
                continue
            if t_inj <= t_flag <= t_inj + window:
                hit = i
                break
            if t_flag > t_inj + window:
                break
        if hit is None:
            conf._bump(skill_of(node), "fn")
        else:
            used[hit] = True
            conf._bump(skill_of(node), "tp")
    for i, (_t_flag, node) in enumerate(flags):
        if not used[i]:
            conf._bump(skill_of(node), "fp")

    # Node executions with neither an injection nor a flag are negatives.
    flag_times = [t for t, _ in flags]
    entered = trace.of_kind("node_entered")
    completed = trace.of_kind("node_completed")
    for entry in entered:
        end = next((e.t_sim for e in completed
                    if e.node == entry.node and e.t_sim >= entry.t_sim),
                   None)
        if end is None:
            continue
        span_has_flag = any(entry.t_sim <= t <= end for t in flag_times)
        span_has_inj = any(entry.t_sim <= t <= end for t, _ in injections)
        if not span_has_flag and not span_has_inj:
            conf._bump(skill_of(entry.node), "tn")
    return conf


def _safe_div(num, den):
    return num / den if den > 0 else 0.0


@dataclass(frozen=True)
class PRStats:
    micro_precision: float
    micro_recall: float
    macro_precision: float
    macro_recall: float
    f1: float  # harmonic mean of the micro values


def precision_recall(confusions) -> PRStats:
    """Micro/macro precision-recall over per-skill confusions.

    Accepts a list of Confusion objects or one Confusion with a per_skill
    breakdown. Skills with no positive events (tp+fp+fn = 0) do not
    contribute to the macro averages.
    """
    if isinstance(confusions, Confusion):
        confusions = (list(confusions.per_skill.values())
                      or [confusions])
    if not confusions:
        raise ValueError("need at least one confusion")
    pooled = Confusion()
    for c in confusions:
        pooled.add(Confusion(tp=c.tp, fp=c.fp, fn=c.fn, tn=c.tn))
    micro_p = _safe_div(pooled.tp, pooled.tp + pooled.fp)
    micro_r = _safe_div(pooled.tp, pooled.tp + pooled.fn)
    active = [c for c in confusions if c.tp + c.fp + c.fn > 0]
    if active:
        macro_p = sum(_safe_div(c.tp, c.tp + c.fp) for c in active) / len(active)
        macro_r = sum(_safe_div(c.tp, c.tp + c.fn) for c in active) / len(active)
    else:
        macro_p = macro_r = 0.0
    f1 = (_safe_div(2 * micro_p * micro_r, micro_p + micro_r)
          if micro_p + micro_r > 0 else 0.0)
    return PRStats(micro_precision=micro_p, micro_recall=micro_r,
                   macro_precision=macro_p, macro_recall=macro_r, f1=f1)


def recovery_rate(results) -> float:
    """Fraction of injections answered by a recovery and a later completion
    of the anomalous node. 0.0 when no anomalies were injected."""
    total = 0
    recovered = 0
    for result in results:
        recoveries = [(e.t_sim, e.node)
                      for e in result.trace.of_kind("recovery_started")]
        completions = [(e.t_sim, e.node)
                       for e in result.trace.of_kind("node_completed")]
        used = [False] * len(recoveries)
        for t_inj, node, *_ in result.injections:
            total += 1
            hit = None
            for i, (t_rec, rnode) in enumerate(recoveries):
                if used[i] or rnode != node or t_rec < t_inj:
                    continue
                hit = i
                break
            if hit is None:
                continue
            t_rec = recoveries[hit][0]
            if any(cnode == node and t_c > t_rec for t_c, cnode in completions):
                used[hit] = True
                recovered += 1
    return _safe_div(recovered, total)


@dataclass(frozen=True)
class ReportRow:
    task: str
    condition: str
    backend: str
    runs: int
    injections: int
    recovery: float
    stats: PRStats


_COLUMNS = ("task", "condition", "backend", "runs", "injections",
            "recovery_rate", "micro_recall", "micro_precision",
            "macro_recall", "macro_precision", "harmonic_f1")


def _row_values(row: ReportRow):
    return (row.task, row.condition, row.backend, row.runs, row.injections,
            f"{row.recovery:.4f}", f"{row.stats.micro_recall:.4f}",
            f"{row.stats.micro_precision:.4f}", f"{row.stats.macro_recall:.4f}",
            f"{row.stats.macro_precision:.4f}", f"{row.stats.f1:.4f}")


def emit_report(rows, csv_path, text_path=None):
    """Write scenario results as CSV and an aligned text table.

    An empty row list still produces files with headers.
    """
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_COLUMNS)
        for row in rows:
            writer.writerow(_row_values(row))
    if text_path is None:
        return
    cells = [_COLUMNS] + [tuple(str(v) for v in _row_values(r)) for r in rows]
    widths = [max(len(line[i]) for line in cells) for i in range(len(_COLUMNS))]
    with open(text_path, "w") as fh:
        for j, line in enumerate(cells):
            fh.write("  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip()
                     + "\n")
            if j == 0:
                fh.write("  ".join("-" * w for w in widths) + "\n")


@dataclass
class LoadedResult:
    """Trace + ground truth reloaded from a persisted run directory."""

    trace: ExecutionTrace
    injections: list  # (t, node_id, fields dict)


def save_run_batch(results, meta: dict, skill_map: dict, out_dir):
    """Persist a scenario batch: per-run trace and truth files plus metadata.

    Only simulation-clock quantities are written, so identical seeds yield
    byte-identical files.
    """
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "meta.txt"), "w") as fh:
        for key, value in meta.items():
            fh.write(f"{key} {value}\n")
        for node, skill in skill_map.items():
            fh.write(f"skill {node} {skill}\n")
    for i, result in enumerate(results):
        result.trace.save(os.path.join(out_dir, f"trace_{i:03d}.txt"))
        with open(os.path.join(out_dir, f"truth_{i:03d}.txt"), "w") as fh:
            for t_inj, node, profile in result.injections:
                fh.write(f"injection t={t_inj:.9g} node={node} "
                         f"kind={profile.kind} "
                         f"amplitude={profile.amplitude:.9g} "
                         f"duration={profile.duration:.9g} "
                         f"pose_deviation={profile.pose_deviation:.9g}\n")


def load_run_batch(run_dir):
    """Reload (meta, skill_map, results) written by :func:`save_run_batch`."""
    meta = {}
    skill_map = {}
    with open(os.path.join(run_dir, "meta.txt")) as fh:
        for raw in fh:
            parts = raw.split()
            if not parts:
                continue
            if parts[0] == "skill":
                skill_map[parts[1]] = parts[2]
            else:
                meta[parts[0]] = " ".join(parts[1:])
    results = []
    traces = sorted(f for f in os.listdir(run_dir) if f.startswith("trace_"))
    for trace_file in traces:
        idx = trace_file[len("trace_"):-len(".txt")]
        trace = ExecutionTrace.load(os.path.join(run_dir, trace_file))
        injections = []
        truth_path = os.path.join(run_dir, f"truth_{idx}.txt")
        if os.path.exists(truth_path):
            with open(truth_path) as fh:
                for raw in fh:
                    parts = raw.split()
                    if not parts or parts[0] != "injection":
                        continue
                    fields = dict(p.split("=", 1) for p in parts[1:])
                    injections.append((float(fields["t"]), fields["node"],
                                       fields))
        results.append(LoadedResult(trace=trace, injections=injections))
    return meta, skill_map, results


def summarize(results, skill_of=None, window=DEFAULT_MATCH_WINDOW):
    """Pooled confusion + PRStats + recovery rate for a result batch."""
    pooled = Confusion()
    for result in results:
        pooled.add(match_detections(result.trace, result.injections,
                                    window=window, skill_of=skill_of))
    return pooled, precision_recall(pooled), recovery_rate(results)
