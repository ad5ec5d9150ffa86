"""Sparse matrix of one-shot demonstration utility scores.

For each training query: one zero-shot probability, then one one-shot
probability per MMR-selected candidate. The recorded delta is the reduction
in absolute prediction error the candidate buys. Entries never measured are
implicitly zero; entries measured at zero are stored, so "no effect" and
"never tried" stay distinguishable.
"""

import json
import logging
import os
from dataclasses import dataclass, field

from . import oracle as oracle_mod
from .corpus import Corpus
from .embedding import EmbeddingStore, Encoder, embed_corpus, encoder_fingerprint
from .errors import CacheInvalidError, ConfigError, MatrixFormatError, TransportError
from .oracle import OracleSpec, build_prompt, oracle_fingerprint
from .retrieval import MMRParams, RetrievalIndex, mmr_select

logger = logging.getLogger(__name__)

MAGIC = "LOGICL-DELTA v1"


@dataclass
class DeltaRecord:
    query_id: str
    demo_id: str
    p0: float
    p1: float
    delta: float


@dataclass
class DeltaMatrix:
    """Rows keyed by query id; metadata pins the build's provenance."""

    rows: dict[str, list[DeltaRecord]]
    n: int
    k_candidates: int
    mmr_lambda: float
    oracle_fp: str
    encoder_fp: str
    partial: bool = False
    fingerprint_warnings: list[str] = field(default_factory=list)

    def entries(self, query_id: str) -> list[DeltaRecord]:
        return self.rows.get(query_id, [])

    def get(self, query_id: str, demo_id: str) -> float:
        for rec in self.rows.get(query_id, ()):
            if rec.demo_id == demo_id:
                return rec.delta
        return 0.0

    def records(self):
        for qid in self.rows:
            yield from self.rows[qid]

    def entry_count(self) -> int:
        return sum(len(r) for r in self.rows.values())


def compute_delta(p0: float, p1: float, label: int) -> float:
    """Reduction in absolute prediction error from adding the demonstration."""
    if not 0.0 <= p0 <= 1.0 or not 0.0 <= p1 <= 1.0:
        raise ConfigError(f"probabilities must be in [0, 1], got p0={p0}, p1={p1}")
    if label not in (0, 1):
        raise ConfigError(f"label must be 0 or 1, got {label}")
    return abs(p0 - label) - abs(p1 - label)


def build_delta_matrix(
    train: Corpus,
    encoder: Encoder,
    oracle_spec: OracleSpec,
    k_candidates: int,
    mmr_lambda: float = 0.7,
    store: EmbeddingStore | None = None,
    checkpoint_path=None,
    checkpoint_every: int = 100,
) -> DeltaMatrix:
    """Construct the sparse utility matrix over the training corpus.

    Per query: one zero-shot oracle call, then one call per MMR candidate,
    so exactly N * (1 + min(k_candidates, N-1)) calls in total. Progress is
    checkpointed every checkpoint_every queries when checkpoint_path is set,
    and a build resumed from a checkpoint is bit-identical to an
    uninterrupted one under a deterministic oracle.
    """
    if len(train) < 2:
        raise ConfigError("delta matrix needs at least 2 training sequences")
    if k_candidates < 1:
        raise ConfigError("k_candidates must be >= 1")

    if store is None:
        store = embed_corpus(train, encoder)
    enc_fp = encoder_fingerprint(encoder)
    ora_fp = oracle_fingerprint(oracle_spec)

    rows: dict[str, list[DeltaRecord]] = {}
    if checkpoint_path is not None and os.path.exists(checkpoint_path):
        ckpt = load_matrix(checkpoint_path, encoder_fp=enc_fp, oracle_fp=ora_fp)
        if ckpt.fingerprint_warnings:
            raise CacheInvalidError(
                "checkpoint does not match the current build: "
                + "; ".join(ckpt.fingerprint_warnings)
            )
        if ckpt.n != len(train) or ckpt.k_candidates != k_candidates:
            raise CacheInvalidError("checkpoint metadata disagrees with the requested build")
        rows = ckpt.rows
        logger.info("resuming delta build: %d/%d queries done", len(rows), len(train))

    seq_by_id = {seq.id: seq for seq in train}
    completed_since_checkpoint = 0

    def checkpoint(partial: bool):
        if checkpoint_path is not None:
            m = DeltaMatrix(
                rows=rows,
                n=len(train),
                k_candidates=k_candidates,
                mmr_lambda=mmr_lambda,
                oracle_fp=ora_fp,
                encoder_fp=enc_fp,
                partial=partial,
            )
            save_matrix(m, checkpoint_path)

    for query in train:
        if query.id in rows:
            continue
        try:
            p0 = oracle_mod.query_oracle(build_prompt([], query), oracle_spec).probability
            pool = RetrievalIndex.from_store(store, exclude={query.id})
            candidates = mmr_select(
                store.vector(query.id), pool, MMRParams(lam=mmr_lambda, k=k_candidates)
            )
            records = []
            for demo_id in candidates:
                demo = seq_by_id[demo_id]
                p1 = oracle_mod.query_oracle(
                    build_prompt([(demo, demo.label)], query), oracle_spec
                ).probability
                records.append(
                    DeltaRecord(
                        query_id=query.id,
                        demo_id=demo_id,
                        p0=p0,
                        p1=p1,
                        delta=compute_delta(p0, p1, query.label),
                    )
                )
        except TransportError:
            checkpoint(partial=True)
            raise
        rows[query.id] = records
        completed_since_checkpoint += 1
        if completed_since_checkpoint >= checkpoint_every:
            checkpoint(partial=True)
            completed_since_checkpoint = 0

    matrix = DeltaMatrix(
        rows=rows,
        n=len(train),
        k_candidates=k_candidates,
        mmr_lambda=mmr_lambda,
        oracle_fp=ora_fp,
        encoder_fp=enc_fp,
        partial=False,
    )
    if checkpoint_path is not None:
        save_matrix(matrix, checkpoint_path)
    return matrix


def save_matrix(matrix: DeltaMatrix, path) -> None:
    """Magic line, metadata JSON, then one JSON row block per query id."""
    meta = {
        "n": matrix.n,
        "k_candidates": matrix.k_candidates,
        "mmr_lambda": matrix.mmr_lambda,
        "oracle_fingerprint": matrix.oracle_fp,
        "encoder_fingerprint": matrix.encoder_fp,
        "partial": matrix.partial or None,
    }
    meta = {k: v for k, v in meta.items() if v is not None}
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(MAGIC + "\n")
        fh.write(json.dumps(meta, sort_keys=True) + "\n")
        for qid in sorted(matrix.rows):
            entries = [[r.demo_id, r.p0, r.p1, r.delta] for r in matrix.rows[qid]]
            fh.write(json.dumps({"q": qid, "count": len(entries), "entries": entries}) + "\n")
    os.replace(tmp, path)


def load_matrix(path, encoder_fp: str | None = None, oracle_fp: str | None = None) -> DeltaMatrix:
    """Lossless reload; fingerprint mismatches set warnings instead of failing."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != MAGIC:
        raise MatrixFormatError(f"{path} is not a delta matrix file (bad magic)", line_no=1)
    if len(lines) < 2:
        raise MatrixFormatError("truncated file: metadata line missing", line_no=2)
    try:
        meta = json.loads(lines[1])
    except json.JSONDecodeError as exc:
        raise MatrixFormatError(f"corrupt metadata: {exc}", line_no=2) from exc

    rows: dict[str, list[DeltaRecord]] = {}
    for line_no, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        try:
            block = json.loads(line)
            qid = block["q"]
            records = [
                DeltaRecord(query_id=qid, demo_id=d, p0=p0, p1=p1, delta=delta)
                for d, p0, p1, delta in block["entries"]
            ]
            if block["count"] != len(records):
                raise ValueError(
                    f"row claims {block['count']} entries but carries {len(records)}"
                )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise MatrixFormatError(f"corrupt row block: {exc}", line_no=line_no) from exc
        rows[qid] = records

    warnings = []
    if encoder_fp is not None and meta.get("encoder_fingerprint") != encoder_fp:
        warnings.append("encoder fingerprint mismatch")
    if oracle_fp is not None and meta.get("oracle_fingerprint") != oracle_fp:
        warnings.append("oracle fingerprint mismatch")
    for w in warnings:
        logger.warning("delta matrix %s: %s", path, w)

    return DeltaMatrix(
        rows=rows,
        n=int(meta["n"]),
        k_candidates=int(meta["k_candidates"]),
        mmr_lambda=float(meta.get("mmr_lambda", 0.7)),
        oracle_fp=meta.get("oracle_fingerprint", ""),
        encoder_fp=meta.get("encoder_fingerprint", ""),
        partial=bool(meta.get("partial", False)),
        fingerprint_warnings=warnings,
    )


def row_top_j(matrix: DeltaMatrix, anchor_ids: list[str], j: int) -> list[tuple[str, float]]:
    """Demos with the highest delta summed over the anchors' rows.

    Missing entries contribute zero; demos that are themselves anchors are
    excluded so the result expands the anchor set instead of duplicating it.
    Ties break by ascending demo id.
    """
    if j < 1:
        raise ConfigError("j must be >= 1")
    anchors = set(anchor_ids)
    sums: dict[str, float] = {}
    for anchor in anchor_ids:
        for rec in matrix.entries(anchor):
            if rec.demo_id in anchors:
                continue
            sums[rec.demo_id] = sums.get(rec.demo_id, 0.0) + rec.delta
    ranked = sorted(sums.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:j]
