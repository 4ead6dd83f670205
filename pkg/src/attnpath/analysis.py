"""Aggregate comparisons over explanation sets.

Implements the quantitative side of the method comparison: best-group
distributions (overall, per predicted class, by correctness), pairwise
agreement between methods on the single best and two best groups,
cross-run modal answers, and per-sample stability across repeated
training runs.  Everything here is pure aggregation over the
interchange files and emits deterministic, byte-stable tables.
"""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, ConfigError, DataError, ValidationError
from .explainers import read_interchange


@dataclass(frozen=True)
class ExplRecord:
    sample_id: int
    predicted: int
    correct: bool | None
    best_groups: tuple[int, ...]


@dataclass
class ExplanationSet:
    """All per-sample explanations of one method in one training run."""

    dataset_id: str
    method: str
    seed: int
    m: int
    group_names: list[str]
    records: list[ExplRecord] = field(default_factory=list)

    @classmethod
    def load(cls, path) -> "ExplanationSet":
        header, rows = read_interchange(path)
        records = [
            ExplRecord(
                sample_id=int(r["sample_id"]),
                predicted=int(r["predicted"]),
                correct=r.get("correct"),
                best_groups=tuple(int(g) for g in r["best_groups"]),
            )
            for r in rows
        ]
        return cls(
            dataset_id=header["dataset"], method=header["method"],
            seed=int(header["seed"]), m=int(header["m"]),
            group_names=list(header["group_names"]), records=records,
        )

    def sample_ids(self) -> list[int]:
        return [r.sample_id for r in self.records]

    def by_sample(self) -> dict[int, ExplRecord]:
        return {r.sample_id: r for r in self.records}


def _check_aligned(sets: list[ExplanationSet]) -> list[int]:
    if not sets:
        raise ConfigError("need at least one explanation set")
    ids = sets[0].sample_ids()
    for s in sets[1:]:
        if s.sample_ids() != ids:
            raise AlignmentError(
                f"sets are not aligned: {sets[0].method}/{sets[0].seed} vs "
                f"{s.method}/{s.seed} cover different samples"
            )
    return ids


def best_group_distribution(expl_set: ExplanationSet, segment: str = "all",
                            class_index: int | None = None) -> np.ndarray | None:
    """Proportion of samples naming each group best, within a segment.

    Segments: "all", "correct", "wrong", or "class" with ``class_index``
    filtering on the predicted class.  An empty segment returns None.
    """
    if segment == "all":
        records = expl_set.records
    elif segment == "correct":
        records = [r for r in expl_set.records if r.correct]
    elif segment == "wrong":
        records = [r for r in expl_set.records if r.correct is False]
    elif segment == "class":
        if class_index is None:
            raise ConfigError("segment='class' requires class_index")
        records = [r for r in expl_set.records if r.predicted == class_index]
    else:
        raise ConfigError(f"unknown segment {segment!r}")
    if not expl_set.records:
        raise ConfigError("explanation set is empty")
    if not records:
        return None
    counts = np.zeros(expl_set.m)
    for r in records:
        counts[r.best_groups[0]] += 1
    return counts / counts.sum()


def mode_best_group(sets: list[ExplanationSet]) -> dict[int, int]:
    """Per-sample modal best group across runs; ties go to the lowest index."""
    ids = _check_aligned(sets)
    out: dict[int, int] = {}
    per_sample = [s.by_sample() for s in sets]
    for sid in ids:
        votes = Counter(p[sid].best_groups[0] for p in per_sample)
        top = max(votes.values())
        out[sid] = min(g for g, c in votes.items() if c == top)
    return out


def _mode_two_best(sets: list[ExplanationSet], sid: int) -> tuple[int, int]:
    """Modal unordered two-best pair; ties go to the lexicographically smallest."""
    votes: Counter = Counter()
    for s in sets:
        groups = s.by_sample()[sid].best_groups
        if len(groups) < 2:
            raise ValidationError(
                f"{s.method}/{s.seed}: sample {sid} has fewer than 2 ranked groups"
            )
        votes[tuple(sorted(groups[:2]))] += 1
    top = max(votes.values())
    return min(pair for pair, c in votes.items() if c == top)


def pairwise_agreement(a: ExplanationSet, b: ExplanationSet, top: int = 1) -> float:
    """Percentage of samples where two methods agree.

    top=1 compares the single best group; top=2 counts a sample as
    agreeing when the two-best sets intersect.
    """
    if top not in (1, 2):
        raise ConfigError(f"top must be 1 or 2, got {top}")
    _check_aligned([a, b])
    hits = 0
    for ra, rb in zip(a.records, b.records):
        if top == 1:
            hits += ra.best_groups[0] == rb.best_groups[0]
        else:
            if len(ra.best_groups) < 2 or len(rb.best_groups) < 2:
                raise ValidationError("two-best agreement needs >= 2 ranked groups")
            hits += bool(set(ra.best_groups[:2]) & set(rb.best_groups[:2]))
    return 100.0 * hits / len(a.records)


def stability(sets: list[ExplanationSet], top: int = 1) -> np.ndarray:
    """Per-sample percentage of runs matching the modal explanation.

    top=1 compares best groups against the per-sample mode; top=2
    counts a run when its two-best set intersects the modal two-best
    set.  Returns the full per-sample distribution, ordered by the
    (shared) sample order of the input sets.
    """
    if top not in (1, 2):
        raise ConfigError(f"top must be 1 or 2, got {top}")
    if len(sets) < 2:
        raise ConfigError("stability needs at least 2 runs")
    ids = _check_aligned(sets)
    per_sample = [s.by_sample() for s in sets]
    if top == 1:
        modal = mode_best_group(sets)
        agree = [
            100.0 * sum(p[sid].best_groups[0] == modal[sid] for p in per_sample) / len(sets)
            for sid in ids
        ]
    else:
        agree = []
        for sid in ids:
            pair = set(_mode_two_best(sets, sid))
            hits = sum(bool(set(p[sid].best_groups[:2]) & pair) for p in per_sample)
            agree.append(100.0 * hits / len(sets))
    return np.array(agree)


def quartiles(values: np.ndarray) -> dict[str, float]:
    v = np.asarray(values, dtype=np.float64)
    return {
        "min": float(v.min()), "q1": float(np.percentile(v, 25)),
        "median": float(np.percentile(v, 50)), "q3": float(np.percentile(v, 75)),
        "max": float(v.max()), "mean": float(v.mean()),
    }


# ---------------------------------------------------------------------------
# full report
# ---------------------------------------------------------------------------


@dataclass
class AnalysisReport:
    dataset_id: str
    group_names: list[str]
    num_classes: int
    distributions: list[dict] = field(default_factory=list)
    pairwise: list[dict] = field(default_factory=list)
    stability: list[dict] = field(default_factory=list)


def run_full_analysis(sets: list[ExplanationSet], pairing: str = "seed") -> AnalysisReport:
    """Build every table of the comparison from loaded explanation sets.

    Methods with several runs are aggregated per seed and via the
    cross-run mode; pairwise agreement pairs runs of two methods by
    seed (default) or over the full cross product.
    """
    if not sets:
        raise ConfigError("no explanation sets given")
    if pairing not in ("seed", "cross"):
        raise ConfigError(f"unknown pairing {pairing!r}")
    dataset_ids = sorted({s.dataset_id for s in sets})
    if len(dataset_ids) > 1:
        raise AlignmentError(f"sets span several datasets: {dataset_ids}")
    by_method: dict[str, list[ExplanationSet]] = {}
    for s in sets:
        by_method.setdefault(s.method, []).append(s)
    for method, runs in by_method.items():
        runs.sort(key=lambda s: s.seed)
        seeds = [s.seed for s in runs]
        if len(set(seeds)) != len(seeds):
            raise AlignmentError(f"method {method!r} has duplicate seeds {seeds}")
    methods = sorted(by_method)
    _check_aligned(sets)
    num_classes = 1 + max((r.predicted for s in sets for r in s.records), default=0)

    report = AnalysisReport(dataset_id=dataset_ids[0], group_names=sets[0].group_names,
                            num_classes=num_classes)

    segments: list[tuple[str, int | None]] = [("all", None), ("correct", None), ("wrong", None)]
    segments += [("class", c) for c in range(num_classes)]
    for method in methods:
        runs = by_method[method]
        modal_set = _modal_set(runs)
        for run_label, expl_set in [("mode", modal_set)] + [
                (f"seed{s.seed}", s) for s in runs]:
            for segment, cls in segments:
                dist = best_group_distribution(expl_set, segment, class_index=cls)
                if dist is None:
                    continue
                report.distributions.append({
                    "method": method, "run": run_label,
                    "segment": segment if cls is None else f"class{cls}",
                    "proportions": [float(p) for p in dist],
                })

    for i, ma in enumerate(methods):
        for mb in methods[i + 1:]:
            for top in (1, 2):
                if any(len(r.best_groups) < 2 for s in by_method[ma] + by_method[mb]
                       for r in s.records) and top == 2:
                    continue
                pairs = _run_pairs(by_method[ma], by_method[mb], pairing)
                values = [pairwise_agreement(a, b, top=top) for a, b in pairs]
                report.pairwise.append({
                    "method_a": ma, "method_b": mb, "top": top, "pairing": pairing,
                    "values": values,
                    "mode_agreement": pairwise_agreement(
                        _modal_set(by_method[ma]), _modal_set(by_method[mb]), top=top),
                })

    for method in methods:
        runs = by_method[method]
        if len(runs) < 2:
            continue
        for top in (1, 2):
            if top == 2 and any(len(r.best_groups) < 2 for s in runs for r in s.records):
                continue
            values = stability(runs, top=top)
            report.stability.append({
                "method": method, "top": top, "runs": len(runs),
                "per_sample": [float(v) for v in values],
                "summary": quartiles(values),
            })
    return report


def _modal_set(runs: list[ExplanationSet]) -> ExplanationSet:
    """Collapse runs of one method into modal best groups per sample.

    The modal record keeps two ranked groups (modal best plus modal
    two-best partner) when every run ranked at least two, and modal
    predicted class / correctness flags (ties to the lowest value).
    """
    if len(runs) == 1:
        return runs[0]
    ids = _check_aligned(runs)
    per_sample = [s.by_sample() for s in runs]
    modal_best = mode_best_group(runs)
    has_two = all(len(r.best_groups) >= 2 for s in runs for r in s.records)
    records = []
    for sid in ids:
        best = modal_best[sid]
        groups: tuple[int, ...] = (best,)
        if has_two:
            # modal best plus a partner from the modal two-best pair
            pair = _mode_two_best(runs, sid)
            partner = pair[1] if pair[0] == best else pair[0]
            groups = (best, partner)
        pred_votes = Counter(p[sid].predicted for p in per_sample)
        top = max(pred_votes.values())
        predicted = min(v for v, c in pred_votes.items() if c == top)
        corr_votes = Counter(p[sid].correct for p in per_sample)
        correct = corr_votes.most_common(1)[0][0]
        records.append(ExplRecord(sample_id=sid, predicted=predicted,
                                  correct=correct, best_groups=groups))
    first = runs[0]
    return ExplanationSet(dataset_id=first.dataset_id, method=first.method, seed=-1,
                          m=first.m, group_names=first.group_names, records=records)


def _run_pairs(runs_a: list[ExplanationSet], runs_b: list[ExplanationSet],
               pairing: str) -> list[tuple[ExplanationSet, ExplanationSet]]:
    if pairing == "cross":
        return [(a, b) for a in runs_a for b in runs_b]
    by_seed_b = {s.seed: s for s in runs_b}
    pairs = [(a, by_seed_b[a.seed]) for a in runs_a if a.seed in by_seed_b]
    if not pairs:
        raise AlignmentError(
            f"no shared seeds between {runs_a[0].method!r} and {runs_b[0].method!r}; "
            "use pairing='cross'"
        )
    return pairs


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def emit_report(report: AnalysisReport | None, output_dir) -> list[str]:
    """Write deterministic TSV tables and plot-ready JSON under output_dir.

    Returns the relative paths written (also recorded in manifest.json).
    Passing None emits just an empty manifest.
    """
    os.makedirs(output_dir, exist_ok=True)
    if not os.access(output_dir, os.W_OK):
        raise DataError(f"output directory {output_dir} is not writable")
    written: list[str] = []

    def emit(name: str, text: str) -> None:
        with open(os.path.join(output_dir, name), "w") as fh:
            fh.write(text)
        written.append(name)

    if report is not None and report.distributions:
        lines = ["method\trun\tsegment\t" + "\t".join(report.group_names)]
        for row in report.distributions:
            lines.append("\t".join([row["method"], row["run"], row["segment"]]
                                   + [_fmt(p) for p in row["proportions"]]))
        emit("distributions.tsv", "\n".join(lines) + "\n")

    if report is not None and report.pairwise:
        for top in (1, 2):
            rows = [r for r in report.pairwise if r["top"] == top]
            if not rows:
                continue
            lines = ["method_a\tmethod_b\tpairing\tmode_agreement\trun_values"]
            for row in rows:
                lines.append("\t".join([
                    row["method_a"], row["method_b"], row["pairing"],
                    _fmt(row["mode_agreement"]),
                    ",".join(_fmt(v) for v in row["values"]),
                ]))
            emit(f"pairwise_top{top}.tsv", "\n".join(lines) + "\n")

    if report is not None and report.stability:
        lines = ["method\ttop\truns\tmin\tq1\tmedian\tq3\tmax\tmean"]
        for row in report.stability:
            s = row["summary"]
            lines.append("\t".join([row["method"], str(row["top"]), str(row["runs"])]
                                   + [_fmt(s[k]) for k in
                                      ("min", "q1", "median", "q3", "max", "mean")]))
        emit("stability.tsv", "\n".join(lines) + "\n")
        emit("stability_full.json", json.dumps(
            {f"{r['method']}_top{r['top']}": r["per_sample"] for r in report.stability},
            sort_keys=True, indent=1) + "\n")

    manifest = {
        "files": sorted(written),
        "dataset": None if report is None else report.dataset_id,
        "group_names": None if report is None else report.group_names,
    }
    with open(os.path.join(output_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    written.append("manifest.json")
    return sorted(written)
