"""Cross-domain log anomaly detection with reasoning-aware demonstration retrieval.

A lightweight log-sequence encoder is trained from LLM feedback: a sparse
matrix of per-demonstration utility scores supervises a three-term objective
(domain alignment, supervised contrast, utility-weighted pair shaping), and
detection retrieves demonstrations by both similarity and learned utility for
frozen-LLM in-context inference.
"""

from .corpus import Corpus, LogSequence, RawLogLine
from .delta import DeltaMatrix, DeltaRecord, build_delta_matrix, compute_delta, row_top_j
from .embedding import (
    BackboneSpec,
    EmbeddingStore,
    Encoder,
    ProjectionHead,
    cosine_similarity,
    embed_backbone,
    embed_corpus,
    encode,
    init_head,
)
from .inference import InferenceConfig, PipelineState, Prediction, detect, detect_batch
from .metrics import Metrics, compute_metrics
from .oracle import OracleResponse, OracleSpec, Prompt, build_prompt, parse_response, query_oracle
from .retrieval import MMRParams, RetrievalIndex, mmr_select, top_k_similar
from .training import (
    LossWeights,
    PairSets,
    TrainConfig,
    delta_loss,
    finite_diff_check,
    grad_total_loss,
    mmd_loss,
    supcon_loss,
    total_loss,
    train_encoder,
)

__version__ = "0.1.0"
