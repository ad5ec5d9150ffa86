import numpy as np
import pytest

from logicl.corpus import Corpus, LogSequence
from logicl.training import Batch, LossWeights, TrainConfig


def make_seq(seq_id, messages, domain="alpha", label=0):
    return LogSequence(id=seq_id, domain=domain, messages=list(messages), label=label)


@pytest.fixture
def tiny_corpus():
    return Corpus(
        [
            make_seq("a1", ["service start ok", "heartbeat fine"], "alpha", 0),
            make_seq("a2", ["service stop FATAL disk", "heartbeat fine"], "alpha", 1),
            make_seq("b1", ["worker idle loop", "queue empty again"], "beta", 0),
            make_seq("b2", ["worker crash FATAL core", "queue empty again"], "beta", 1),
        ]
    )


def make_random_instance(seed, fixed_sigma=1.0):
    """Seeded random (W, batch, weights, config) for gradient checking.

    Dimensions and batch stay small, deltas keep a margin from the hinge
    threshold, and the bandwidth is fixed so the objective is the smooth
    function the analytic gradient differentiates.
    """
    rng = np.random.default_rng(seed)
    d_in = int(rng.integers(3, 9))
    d_out = int(rng.integers(3, 9))
    n = int(rng.integers(4, 9))
    X = rng.normal(size=(n, d_in))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    W = np.eye(d_out, d_in) + rng.normal(0, 0.2, size=(d_out, d_in))

    labels = rng.integers(0, 2, size=n)
    labels[1] = labels[0]  # guarantee at least one positive pair
    half = n // 2
    source_idx = np.arange(half)
    target_idx = np.arange(half, n)

    theta = 0.1
    pos_pairs, neg_pairs = [], []
    for _ in range(int(rng.integers(1, 4))):
        i, j = rng.choice(n, size=2, replace=False)
        pos_pairs.append((int(i), int(j), float(rng.uniform(0.2, 0.9))))
    for _ in range(int(rng.integers(1, 4))):
        i, j = rng.choice(n, size=2, replace=False)
        # keep |delta| away from the hinge boundary at theta
        neg_pairs.append((int(i), int(j), -float(rng.uniform(theta + 0.1, 0.9))))

    batch = Batch(
        X=X,
        labels=labels,
        source_idx=source_idx,
        target_idx=target_idx,
        pos_pairs=pos_pairs,
        neg_pairs=neg_pairs,
    )
    weights = LossWeights(lambda_mmd=0.1, lambda_supcon=1.0, lambda_delta=1.0, lambda_delta_neg=1.0)
    config = TrainConfig(theta=theta, kernel_bandwidth=fixed_sigma)
    return W, batch, weights, config
