"""Confusion-matrix metrics, JSON run reports, and alignment-matrix exports."""

import csv
import hashlib
import json
from dataclasses import asdict, dataclass

from .delta import DeltaMatrix
from .embedding import EmbeddingStore, cosine_similarity
from .errors import ConfigError

REPORT_SCHEMA_VERSION = 1


@dataclass
class Metrics:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    failed: int = 0
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    precision_defined: bool = True
    recall_defined: bool = True

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int, failed: int = 0) -> "Metrics":
        precision_defined = (tp + fp) > 0
        recall_defined = (tp + fn) > 0
        precision = tp / (tp + fp) if precision_defined else 0.0
        recall = tp / (tp + fn) if recall_defined else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        return cls(
            tp=tp,
            fp=fp,
            fn=fn,
            tn=tn,
            failed=failed,
            precision=precision,
            recall=recall,
            f1=f1,
            precision_defined=precision_defined,
            recall_defined=recall_defined,
        )


def compute_metrics(predictions, labels: dict, failed_as_normal: bool = False) -> Metrics:
    """Counts and P/R/F1 over id-aligned predictions.

    Failed predictions are excluded from the confusion matrix and reported
    separately unless failed_as_normal forces them to decision 0.
    """
    pred_ids = {p.sequence_id for p in predictions}
    if pred_ids != set(labels):
        missing = set(labels) - pred_ids
        extra = pred_ids - set(labels)
        raise ConfigError(
            f"prediction/label id mismatch: missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}"
        )
    tp = fp = fn = tn = failed = 0
    for p in predictions:
        truth = labels[p.sequence_id]
        if p.failed:
            if not failed_as_normal:
                failed += 1
                continue
            decision = 0
        else:
            decision = p.decision
        if decision == 1 and truth == 1:
            tp += 1
        elif decision == 1 and truth == 0:
            fp += 1
        elif decision == 0 and truth == 1:
            fn += 1
        else:
            tn += 1
    return Metrics.from_counts(tp, fp, fn, tn, failed)


def export_alignment_matrices(
    source_ids: list[str],
    target_ids: list[str],
    store: EmbeddingStore,
    matrix: DeltaMatrix,
    similarity_path,
    delta_path,
) -> None:
    """Paired CSVs over the same (target row, source column) grid.

    One holds cosine similarities, the other delta scores with zero for
    pairs the sparse matrix never measured; identical headers and row labels
    let external plotting overlay them.
    """
    for sid in list(source_ids) + list(target_ids):
        if sid not in store:
            raise ConfigError(f"id {sid} has no embedding")
    header = ["id"] + list(source_ids)
    with open(similarity_path, "w", encoding="utf-8", newline="") as sim_fh, open(
        delta_path, "w", encoding="utf-8", newline=""
    ) as delta_fh:
        sim_writer = csv.writer(sim_fh)
        delta_writer = csv.writer(delta_fh)
        sim_writer.writerow(header)
        delta_writer.writerow(header)
        for tid in target_ids:
            tvec = store.vector(tid)
            sim_writer.writerow(
                [tid] + [f"{cosine_similarity(tvec, store.vector(sid)):.6f}" for sid in source_ids]
            )
            delta_writer.writerow([tid] + [f"{matrix.get(tid, sid):.6f}" for sid in source_ids])


def config_hash(snapshot: dict) -> str:
    return hashlib.sha256(json.dumps(snapshot, sort_keys=True).encode("utf-8")).hexdigest()


def write_report(
    metrics: Metrics,
    config_snapshot: dict,
    path,
    fingerprints: dict | None = None,
    timing: dict | None = None,
) -> dict:
    """Single versioned JSON document tying results to their configuration."""
    timing = dict(timing or {})
    for stage, seconds in timing.items():
        if seconds < 0:
            raise ConfigError(f"negative timing for {stage}")
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "metrics": asdict(metrics),
        "config": config_snapshot,
        "config_hash": config_hash(config_snapshot),
        "fingerprints": dict(fingerprints or {}),
        "timing": timing,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report
