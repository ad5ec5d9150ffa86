"""Projection-head optimization against the three-term objective.

total = w_mmd * domain-alignment MMD
      + w_supcon * supervised contrastive term
      + w_delta * (positive-pair pull + w_delta_neg * hinged interference term)

Everything runs through explicit numpy gradients; the chain rule goes through
normalize(W @ x). Kinks (the negative-pair hinge, the similarity floor, the
clamp under the MMD square root) take subgradient zero. The kernel bandwidth,
when resolved by the median heuristic, is treated as a per-batch constant.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus
from .delta import DeltaMatrix
from .embedding import EmbeddingStore, Encoder, ProjectionHead, embed_corpus_backbone
from .errors import ConfigError, LogiclError, UninformativeBatchError

logger = logging.getLogger(__name__)


@dataclass
class LossWeights:
    lambda_mmd: float = 0.1
    lambda_supcon: float = 1.0
    lambda_delta: float = 1.0
    lambda_delta_neg: float = 1.0

    def __post_init__(self):
        for name in ("lambda_mmd", "lambda_supcon", "lambda_delta", "lambda_delta_neg"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {value}")


@dataclass
class TrainConfig:
    tau: float = 0.1
    theta: float = 0.1
    epsilon: float = 1e-8
    sim_floor: float = 1e-4
    learning_rate: float = 1e-2
    epochs: int = 20
    batch_source: int = 16
    batch_target: int = 16
    kernel_bandwidth: object = "median"  # "median" or a fixed positive float
    mmd_squared: bool = False
    epoch_delta_pass: bool = False
    seed: int = 0
    source_domain: str | None = None
    target_domain: str | None = None

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.theta < 0:
            raise ConfigError("theta must be >= 0")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.sim_floor <= 0:
            raise ConfigError("sim_floor must be > 0")
        # lr = 0 is allowed: a no-op training run is a useful control.
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_source < 1 or self.batch_target < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.kernel_bandwidth != "median" and float(self.kernel_bandwidth) <= 0:
            raise ConfigError("fixed kernel bandwidth must be > 0")


@dataclass
class PairSets:
    """Pairs split by the sign of their utility score; zero scores drop out."""

    positives: list[tuple[str, str, float]] = field(default_factory=list)
    negatives: list[tuple[str, str, float]] = field(default_factory=list)

    @classmethod
    def from_matrix(cls, matrix: DeltaMatrix) -> "PairSets":
        pos, neg = [], []
        for rec in matrix.records():
            if rec.delta > 0:
                pos.append((rec.query_id, rec.demo_id, rec.delta))
            elif rec.delta < 0:
                neg.append((rec.query_id, rec.demo_id, rec.delta))
        return cls(positives=pos, negatives=neg)


# ---------------------------------------------------------------------------
# Individual loss terms (value-only public surface)
# ---------------------------------------------------------------------------


def mmd_loss(source_vecs, target_vecs, bandwidth: float, squared: bool = False) -> float:
    """Kernel-expansion estimate of the RKHS mean-embedding distance.

    Biased V-statistic with diagonal terms; Gaussian kernel
    k(x, y) = exp(-|x - y|^2 / (2 sigma^2)). Returns the norm, not its
    square, unless squared is set.
    """
    H = np.atleast_2d(np.asarray(source_vecs, dtype=float))
    B = np.atleast_2d(np.asarray(target_vecs, dtype=float))
    if H.shape[0] == 0 or B.shape[0] == 0:
        raise ConfigError("mmd_loss needs non-empty source and target sets")
    if H.shape[1] != B.shape[1]:
        raise ConfigError("source and target vectors differ in dimension")
    if bandwidth <= 0:
        raise ConfigError(f"bandwidth must be > 0, got {bandwidth}")
    khh = _gaussian_kernel(H, H, bandwidth).mean()
    kbb = _gaussian_kernel(B, B, bandwidth).mean()
    khb = _gaussian_kernel(H, B, bandwidth).mean()
    d = max(0.0, float(khh + kbb - 2.0 * khb))
    return d if squared else float(np.sqrt(d))


def _gaussian_kernel(A: np.ndarray, B: np.ndarray, sigma: float) -> np.ndarray:
    d2 = np.sum(A**2, axis=1)[:, None] + np.sum(B**2, axis=1)[None, :] - 2.0 * A @ B.T
    return np.exp(-np.maximum(d2, 0.0) / (2.0 * sigma**2))


def _unit_rows(vecs) -> np.ndarray:
    V = np.atleast_2d(np.asarray(vecs, dtype=float))
    norms = np.linalg.norm(V, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ConfigError("zero vector passed to a cosine-based loss")
    return V / norms


def supcon_loss(vecs, labels, tau: float, epsilon: float = 1e-8) -> float:
    """Supervised contrastive term over one batch.

    Cosine similarities, temperature tau, the smoothing constant added to the
    numerator and denominator as written. The contrast set for an anchor is
    the rest of the batch; anchors without a same-label partner are skipped
    and the outer mean runs over contributing anchors only.
    """
    V = _unit_rows(vecs)
    y = np.asarray(labels)
    if V.shape[0] != y.shape[0]:
        raise ConfigError("vecs and labels differ in length")
    if V.shape[0] < 2:
        raise ConfigError("supcon_loss needs a batch of at least 2")
    value, _ = _supcon_core(V, y, tau, epsilon)
    return value


def _supcon_core(V: np.ndarray, y: np.ndarray, tau: float, epsilon: float):
    n = V.shape[0]
    S = V @ V.T
    E = np.exp(S / tau)
    off_diag = ~np.eye(n, dtype=bool)
    same = (y[:, None] == y[None, :]) & off_diag
    p_count = same.sum(axis=1)
    contrib = p_count > 0
    n_contrib = int(contrib.sum())
    if n_contrib == 0:
        raise UninformativeBatchError("no anchor in the batch has a same-label partner")

    den = (E * off_diag).sum(axis=1) + epsilon
    log_ratio = np.log(E + epsilon) - np.log(den)[:, None]
    per_anchor = np.where(contrib, -(log_ratio * same).sum(axis=1) / np.maximum(p_count, 1), 0.0)
    value = float(per_anchor[contrib].mean())

    # d(loss)/d(S[i,a]) for every ordered pair as it appears in the formula.
    G = np.zeros((n, n))
    inv_pc = np.where(contrib, 1.0 / np.maximum(p_count, 1), 0.0)
    G -= same * (E / tau) / (E + epsilon) * inv_pc[:, None]
    G += (off_diag & contrib[:, None]) * (E / tau) / den[:, None]
    G /= n_contrib
    return value, G


def delta_loss(
    pairs: PairSets,
    embeddings,
    tau: float,
    theta: float,
    lambda_delta_neg: float,
    sim_floor: float = 1e-4,
) -> float:
    """Utility-weighted pair objective.

    Positive pairs contribute -delta * log(max(s, sim_floor) / tau); negative
    pairs contribute max(0, |delta| - theta) * (1 - s), weighted by
    lambda_delta_neg. Empty sets contribute zero. embeddings maps ids to
    vectors (an EmbeddingStore or a plain dict).
    """
    lookup = embeddings.vector if hasattr(embeddings, "vector") else embeddings.__getitem__

    def sim(a, b):
        va, vb = np.asarray(lookup(a), dtype=float), np.asarray(lookup(b), dtype=float)
        return float(
            np.clip(va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb)), -1.0, 1.0)
        )

    try:
        l_pos = sum(-d * np.log(max(sim(q, m), sim_floor) / tau) for q, m, d in pairs.positives)
        l_neg = sum(
            max(0.0, abs(d) - theta) * (1.0 - sim(q, m)) for q, m, d in pairs.negatives
        )
    except KeyError as exc:
        raise ConfigError(f"pair references unknown sequence id {exc}") from exc
    return float(l_pos + lambda_delta_neg * l_neg)


# ---------------------------------------------------------------------------
# Batched loss + analytic gradient
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """One optimization step's worth of data, everything index-based.

    X holds backbone vectors (frozen); pair tuples are (i, j, delta) local
    row indices into X.
    """

    X: np.ndarray
    labels: np.ndarray
    source_idx: np.ndarray
    target_idx: np.ndarray
    pos_pairs: list[tuple[int, int, float]] = field(default_factory=list)
    neg_pairs: list[tuple[int, int, float]] = field(default_factory=list)


@dataclass
class LossBreakdown:
    l_mmd: float = 0.0
    l_supcon: float = 0.0
    l_delta_pos: float = 0.0
    l_delta_neg: float = 0.0
    l_total: float = 0.0


def resolve_bandwidth(V: np.ndarray, config: TrainConfig) -> float:
    """Median pairwise distance in the batch, or the configured fixed value."""
    if config.kernel_bandwidth != "median":
        return float(config.kernel_bandwidth)
    n = V.shape[0]
    if n < 2:
        return 1.0
    d2 = np.sum(V**2, axis=1)[:, None] + np.sum(V**2, axis=1)[None, :] - 2.0 * V @ V.T
    dists = np.sqrt(np.maximum(d2[np.triu_indices(n, k=1)], 0.0))
    sigma = float(np.median(dists))
    return sigma if sigma > 0 else 1.0


def _encode_batch(W: np.ndarray, X: np.ndarray):
    U = X @ W.T
    norms = np.linalg.norm(U, axis=1)
    if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
        raise LogiclError("projection produced a zero or non-finite vector in the batch")
    V = U / norms[:, None]
    return V, norms


def _mmd_core(V: np.ndarray, src: np.ndarray, tgt: np.ndarray, sigma: float, squared: bool):
    nh, nb = len(src), len(tgt)
    if nh == 0 or nb == 0:
        raise ConfigError("batch is missing source or target members for the MMD term")
    K = _gaussian_kernel(V, V, sigma)
    C = np.zeros_like(K)
    C[np.ix_(src, src)] = 1.0 / nh**2
    C[np.ix_(tgt, tgt)] = 1.0 / nb**2
    C[np.ix_(src, tgt)] = -1.0 / (nh * nb)
    C[np.ix_(tgt, src)] = -1.0 / (nh * nb)
    d = float((C * K).sum())
    d_clamped = max(d, 0.0)
    value = d_clamped if squared else float(np.sqrt(d_clamped))

    # Subgradient zero at the clamp kink (d <= 0).
    if squared:
        outer = 1.0 if d > 0 else 0.0
    else:
        outer = 1.0 / (2.0 * value) if value > 1e-12 else 0.0
    A = C * K * (-1.0 / sigma**2)
    G = 2.0 * outer * (A.sum(axis=1)[:, None] * V - A @ V)
    return value, G


def _delta_core(V: np.ndarray, pos_pairs, neg_pairs, tau, theta, sim_floor):
    n = V.shape[0]
    G_pos = np.zeros((n, n))
    G_neg = np.zeros((n, n))
    l_pos = 0.0
    l_neg = 0.0
    for i, j, d in pos_pairs:
        s = float(V[i] @ V[j])
        l_pos += -d * np.log(max(s, sim_floor) / tau)
        if s > sim_floor:
            G_pos[i, j] += -d / s
    for i, j, d in neg_pairs:
        s = float(V[i] @ V[j])
        w = max(0.0, abs(d) - theta)
        l_neg += w * (1.0 - s)
        G_neg[i, j] += -w
    return float(l_pos), float(l_neg), G_pos, G_neg


def _backprop_to_W(G_v: np.ndarray, V: np.ndarray, norms: np.ndarray, X: np.ndarray) -> np.ndarray:
    radial = np.sum(G_v * V, axis=1, keepdims=True)
    P = (G_v - radial * V) / norms[:, None]
    return P.T @ X


def total_loss(
    W: np.ndarray,
    batch: Batch,
    weights: LossWeights,
    config: TrainConfig,
    sigma: float | None = None,
) -> tuple[float, LossBreakdown]:
    """Weighted objective over one batch, with the unweighted term values."""
    value, _, breakdown = _loss_and_grad(W, batch, weights, config, sigma, want_grad=False)
    return value, breakdown


def grad_total_loss(
    W: np.ndarray,
    batch: Batch,
    weights: LossWeights,
    config: TrainConfig,
    sigma: float | None = None,
) -> np.ndarray:
    """Analytic d(total)/dW, same shape as W."""
    _, grad, _ = _loss_and_grad(W, batch, weights, config, sigma, want_grad=True)
    return grad


def _loss_and_grad(W, batch, weights, config, sigma, want_grad):
    V, norms = _encode_batch(W, batch.X)
    G_v = np.zeros_like(V)
    bd = LossBreakdown()

    if weights.lambda_mmd > 0:
        if sigma is None:
            sigma = resolve_bandwidth(V, config)
        bd.l_mmd, g = _mmd_core(V, batch.source_idx, batch.target_idx, sigma, config.mmd_squared)
        G_v += weights.lambda_mmd * g

    if weights.lambda_supcon > 0:
        bd.l_supcon, G_s = _supcon_core(V, batch.labels, config.tau, config.epsilon)
        G_v += weights.lambda_supcon * (G_s @ V + G_s.T @ V)

    if weights.lambda_delta > 0 and (batch.pos_pairs or batch.neg_pairs):
        bd.l_delta_pos, bd.l_delta_neg, G_pos, G_neg = _delta_core(
            V, batch.pos_pairs, batch.neg_pairs, config.tau, config.theta, config.sim_floor
        )
        coeff = G_pos + weights.lambda_delta_neg * G_neg
        G_v += weights.lambda_delta * (coeff @ V + coeff.T @ V)

    bd.l_total = float(
        weights.lambda_mmd * bd.l_mmd
        + weights.lambda_supcon * bd.l_supcon
        + weights.lambda_delta * (bd.l_delta_pos + weights.lambda_delta_neg * bd.l_delta_neg)
    )
    grad = _backprop_to_W(G_v, V, norms, batch.X) if want_grad else None
    return bd.l_total, grad, bd


def finite_diff_check(
    W: np.ndarray,
    batch: Batch,
    weights: LossWeights,
    config: TrainConfig,
    h: float = 1e-5,
    loss_fn=None,
    grad_fn=None,
) -> float:
    """Max relative error of the analytic gradient vs central differences.

    The kernel bandwidth is resolved once at the base point so both sides
    differentiate the same function. loss_fn/grad_fn default to the full
    objective; substituting a known-gradient function (e.g. a quadratic)
    validates the harness itself.
    """
    if h <= 0:
        raise ConfigError("h must be > 0")
    if loss_fn is None:
        V, _ = _encode_batch(W, batch.X)
        sigma = resolve_bandwidth(V, config) if weights.lambda_mmd > 0 else None
        loss_fn = lambda M: total_loss(M, batch, weights, config, sigma=sigma)[0]  # noqa: E731
        grad_fn = lambda M: grad_total_loss(M, batch, weights, config, sigma=sigma)  # noqa: E731
    analytic = grad_fn(W)
    worst = 0.0
    for i in range(W.shape[0]):
        for j in range(W.shape[1]):
            Wp = W.copy()
            Wp[i, j] += h
            Wm = W.copy()
            Wm[i, j] -= h
            fd = (loss_fn(Wp) - loss_fn(Wm)) / (2.0 * h)
            a = analytic[i, j]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    l_mmd: float
    l_supcon: float
    l_delta_pos: float
    l_delta_neg: float
    l_total: float


def write_loss_trace(trace: list[EpochStats], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "l_mmd", "l_supcon", "l_delta_pos", "l_delta_neg", "l_total"])
        for row in trace:
            writer.writerow(
                [row.epoch, row.l_mmd, row.l_supcon, row.l_delta_pos, row.l_delta_neg, row.l_total]
            )


def _domain_roles(corpus: Corpus, config: TrainConfig) -> tuple[str, str]:
    if config.source_domain and config.target_domain:
        return config.source_domain, config.target_domain
    seen: list[str] = []
    for seq in corpus:
        if seq.domain not in seen:
            seen.append(seq.domain)
    if len(seen) == 1:
        return seen[0], seen[0]
    if len(seen) == 2:
        return seen[0], seen[1]
    raise ConfigError(
        f"corpus has domains {seen}; set source_domain and target_domain explicitly"
    )


def mean_positive_cosine(head: ProjectionHead, store: EmbeddingStore, pairs: PairSets) -> float:
    """Mean cosine over the positive pairs under the given head; the quantity
    delta-guided training is expected to push up."""
    if not pairs.positives:
        raise ConfigError("no positive pairs to average over")
    U = store.vectors @ head.W.T
    V = U / np.linalg.norm(U, axis=1, keepdims=True)
    idx = {sid: i for i, sid in enumerate(store.ids)}
    sims = [float(V[idx[q]] @ V[idx[d]]) for q, d, _ in pairs.positives]
    return float(np.mean(sims))


def train_encoder(
    train_corpus: Corpus,
    delta_matrix: DeltaMatrix,
    encoder: Encoder,
    weights: LossWeights,
    config: TrainConfig,
    backbone_store: EmbeddingStore | None = None,
) -> tuple[ProjectionHead, list[EpochStats]]:
    """Plain seeded gradient descent on the projection head.

    Per epoch both domain pools are reshuffled and consumed in fixed-size
    batches; only delta pairs with both endpoints inside a batch contribute
    to that step. Bit-reproducible for a fixed seed.
    """
    if backbone_store is None:
        backbone_store = embed_corpus_backbone(train_corpus, encoder.backbone)
    idx = {sid: i for i, sid in enumerate(backbone_store.ids)}
    for qid in delta_matrix.rows:
        if qid not in idx:
            raise ConfigError(f"delta matrix query {qid} not present in the training corpus")

    X = backbone_store.vectors
    labels = np.array([seq.label for seq in train_corpus])
    domains = [seq.domain for seq in train_corpus]
    src_domain, tgt_domain = _domain_roles(train_corpus, config)
    src_all = np.array([i for i, d in enumerate(domains) if d == src_domain], dtype=int)
    tgt_all = np.array([i for i, d in enumerate(domains) if d == tgt_domain], dtype=int)
    if len(src_all) == 0 or len(tgt_all) == 0:
        raise ConfigError("training corpus is missing source or target domain sequences")

    pairs = PairSets.from_matrix(delta_matrix)
    pos_idx = [(idx[q], idx[d], delta) for q, d, delta in pairs.positives]
    neg_idx = [(idx[q], idx[d], delta) for q, d, delta in pairs.negatives]

    rng = np.random.default_rng(config.seed)
    W = encoder.head.W.copy()
    trace: list[EpochStats] = []

    bs, bt = min(config.batch_source, len(src_all)), min(config.batch_target, len(tgt_all))
    n_batches = max(1, min(len(src_all) // bs, len(tgt_all) // bt))

    for epoch in range(1, config.epochs + 1):
        src_perm = src_all[rng.permutation(len(src_all))]
        tgt_perm = tgt_all[rng.permutation(len(tgt_all))]
        sums = np.zeros(5)
        steps = 0
        for b in range(n_batches):
            members = np.concatenate(
                [src_perm[b * bs : (b + 1) * bs], tgt_perm[b * bt : (b + 1) * bt]]
            )
            local = {g: l for l, g in enumerate(members)}
            member_set = set(members.tolist())
            batch = Batch(
                X=X[members],
                labels=labels[members],
                source_idx=np.arange(bs),
                target_idx=np.arange(bs, bs + bt),
                pos_pairs=[
                    (local[i], local[j], d)
                    for i, j, d in pos_idx
                    if i in member_set and j in member_set
                ],
                neg_pairs=[
                    (local[i], local[j], d)
                    for i, j, d in neg_idx
                    if i in member_set and j in member_set
                ],
            )
            loss, bd = total_loss(W, batch, weights, config)
            if not np.isfinite(loss):
                raise LogiclError(
                    f"non-finite loss at epoch {epoch} step {b}: "
                    f"mmd={bd.l_mmd} supcon={bd.l_supcon} "
                    f"delta+={bd.l_delta_pos} delta-={bd.l_delta_neg}"
                )
            grad = grad_total_loss(W, batch, weights, config)
            W = W - config.learning_rate * grad
            sums += [bd.l_mmd, bd.l_supcon, bd.l_delta_pos, bd.l_delta_neg, bd.l_total]
            steps += 1

        if config.epoch_delta_pass and (pos_idx or neg_idx):
            # One extra step over every delta pair, ignoring the batch subsetting.
            endpoints = sorted({i for i, j, _ in pos_idx + neg_idx} | {j for _, j, _ in pos_idx + neg_idx})
            local = {g: l for l, g in enumerate(endpoints)}
            batch = Batch(
                X=X[endpoints],
                labels=labels[endpoints],
                source_idx=np.array([local[i] for i in src_all if i in local], dtype=int),
                target_idx=np.array([local[i] for i in tgt_all if i in local], dtype=int),
                pos_pairs=[(local[i], local[j], d) for i, j, d in pos_idx],
                neg_pairs=[(local[i], local[j], d) for i, j, d in neg_idx],
            )
            delta_only = LossWeights(
                lambda_mmd=0.0,
                lambda_supcon=0.0,
                lambda_delta=weights.lambda_delta,
                lambda_delta_neg=weights.lambda_delta_neg,
            )
            grad = grad_total_loss(W, batch, weights=delta_only, config=config)
            W = W - config.learning_rate * grad

        means = sums / max(steps, 1)
        trace.append(EpochStats(epoch, *[float(v) for v in means]))
        logger.debug("epoch %d: total=%.6f", epoch, means[4])

    return ProjectionHead(W=W), trace
