"""Dual-source demonstration retrieval and in-context prediction.

For each test sequence: top-i cosine anchors from the training pool, then
top-j expansions taken from the delta rows of those anchors. Sparse rows are
backfilled with the next-best similarity neighbors so the prompt carries the
full demonstration budget whenever the pool allows.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import oracle as oracle_mod
from .corpus import Corpus, LogSequence
from .delta import DeltaMatrix, row_top_j
from .embedding import Encoder, encode
from .errors import ConfigError, OracleParseError, TransportError
from .oracle import OracleSpec, build_prompt
from .retrieval import RetrievalIndex, top_k_similar

logger = logging.getLogger(__name__)


@dataclass
class InferenceConfig:
    top_i: int = 4
    top_j: int = 4
    threshold: float = 0.5
    cot_enabled: bool = False
    failed_as_normal: bool = False
    max_failure_ratio: float = 0.5

    def __post_init__(self):
        if self.top_i < 1:
            raise ConfigError("top_i must be >= 1")
        if self.top_j < 0:
            raise ConfigError("top_j must be >= 0")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be inside (0, 1), got {self.threshold}")
        if not 0.0 <= self.max_failure_ratio <= 1.0:
            raise ConfigError("max_failure_ratio must be in [0, 1]")

    @property
    def k_total(self) -> int:
        return self.top_i + self.top_j


@dataclass
class Prediction:
    sequence_id: str
    probability: float | None
    decision: int | None
    anchors: list[str]
    expansions: list[str]
    reasoning: str | None = None
    failed: bool = False


@dataclass
class PipelineState:
    """Everything detection needs, immutable during a run."""

    encoder: Encoder
    train_corpus: Corpus
    index: RetrievalIndex
    matrix: DeltaMatrix
    oracle_spec: OracleSpec
    _seq_by_id: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._seq_by_id = {seq.id: seq for seq in self.train_corpus}

    def sequence(self, seq_id: str) -> LogSequence:
        return self._seq_by_id[seq_id]


def select_demonstrations(
    test_vec: np.ndarray,
    train_index: RetrievalIndex,
    delta_matrix: DeltaMatrix,
    cfg: InferenceConfig,
) -> tuple[list[str], list[str]]:
    """Anchor set and expansion set, disjoint, in prompt order.

    Anchors are ranked by similarity descending; expansions by summed delta
    descending, with similarity-ranked backfill when the delta rows are too
    sparse to fill the budget.
    """
    if len(train_index) == 0:
        raise ConfigError("train index is empty")
    ranked = top_k_similar(test_vec, train_index, k=len(train_index))
    anchors = [sid for sid, _ in ranked[: cfg.top_i]]

    expansions: list[str] = []
    if cfg.top_j > 0:
        expansions = [sid for sid, _ in row_top_j(delta_matrix, anchors, cfg.top_j)]
        taken = set(anchors) | set(expansions)
        budget = min(cfg.k_total, len(train_index))
        for sid, _ in ranked:
            if len(anchors) + len(expansions) >= budget:
                break
            if sid not in taken:
                expansions.append(sid)
                taken.add(sid)
    return anchors, expansions


def detect(test_seq: LogSequence, state: PipelineState, cfg: InferenceConfig) -> Prediction:
    """Encode, retrieve, prompt, threshold. Oracle failures yield a sentinel."""
    vec = encode(test_seq, state.encoder)
    anchors, expansions = select_demonstrations(vec, state.index, state.matrix, cfg)
    demos = [(state.sequence(sid), state.sequence(sid).label) for sid in anchors + expansions]
    prompt = build_prompt(demos, test_seq, cot=cfg.cot_enabled)
    try:
        resp = oracle_mod.query_oracle(prompt, state.oracle_spec)
    except (TransportError, OracleParseError) as exc:
        logger.warning("oracle failed for %s: %s", test_seq.id, exc)
        return Prediction(
            sequence_id=test_seq.id,
            probability=None,
            decision=None,
            anchors=anchors,
            expansions=expansions,
            failed=True,
        )
    decision = 1 if resp.probability >= cfg.threshold else 0
    return Prediction(
        sequence_id=test_seq.id,
        probability=resp.probability,
        decision=decision,
        anchors=anchors,
        expansions=expansions,
        reasoning=resp.reasoning,
    )


def detect_batch(test_corpus: Corpus, state: PipelineState, cfg: InferenceConfig) -> list[Prediction]:
    """detect() over the corpus, output in input order.

    Aborts once the failure count can no longer stay within the configured
    failure-ratio limit.
    """
    limit = cfg.max_failure_ratio * len(test_corpus)
    predictions = []
    failures = 0
    for seq in test_corpus:
        pred = detect(seq, state, cfg)
        predictions.append(pred)
        if pred.failed:
            failures += 1
            if failures > limit:
                raise TransportError(
                    f"aborting: {failures} oracle failures exceed "
                    f"{cfg.max_failure_ratio:.0%} of {len(test_corpus)} queries"
                )
    return predictions


def save_predictions(predictions: list[Prediction], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in predictions:
            fh.write(
                json.dumps(
                    {
                        "sequence_id": p.sequence_id,
                        "probability": p.probability,
                        "decision": p.decision,
                        "anchors": p.anchors,
                        "expansions": p.expansions,
                        "reasoning": p.reasoning,
                        "failed": p.failed,
                    }
                )
                + "\n"
            )


def load_predictions(path) -> list[Prediction]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out.append(Prediction(**obj))
    return out
