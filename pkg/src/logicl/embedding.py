"""Sequence encoding: frozen backbone plus a trainable projection head.

The default backbone is a signed feature-hashing char n-gram embedder, a
deterministic offline stand-in for a sentence-transformer; a remote client
speaks the OpenAI-compatible embeddings protocol. Either way the output of
encode() is a unit-norm vector.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .corpus import Corpus, LogSequence
from .errors import CacheInvalidError, ConfigError, DegenerateInputError, TransportError

# Multi-message sequences are joined with this token before embedding.
MESSAGE_SEPARATOR = " ;-; "

AUTH_TOKEN_ENV = "LOGICL_API_TOKEN"


@dataclass
class BackboneSpec:
    """Frozen embedder settings. kind is "hash_ngram" or "remote"."""

    kind: str = "hash_ngram"
    ngram_min: int = 3
    ngram_max: int = 5
    dim: int = 384
    seed: int = 0
    endpoint: str = ""
    model: str = ""
    timeout: float = 30.0

    def __post_init__(self):
        if self.kind not in ("hash_ngram", "remote"):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        if self.dim < 2:
            raise ConfigError("backbone dim must be >= 2")
        if self.ngram_min > self.ngram_max:
            raise ConfigError("ngram_min must be <= ngram_max")
        if self.kind == "remote" and not self.endpoint:
            raise ConfigError("remote backbone needs an endpoint")


@dataclass
class ProjectionHead:
    """Trainable linear map applied on top of the frozen backbone."""

    W: np.ndarray

    @property
    def d_out(self) -> int:
        return self.W.shape[0]

    @property
    def d_in(self) -> int:
        return self.W.shape[1]


def init_head(d_in: int, d_out: int | None = None, seed: int = 0, noise: float = 1e-3) -> ProjectionHead:
    """Identity plus small Gaussian noise, so training starts from backbone geometry."""
    d_out = d_in if d_out is None else d_out
    rng = np.random.default_rng(seed)
    W = np.eye(d_out, d_in) + rng.normal(0.0, noise, size=(d_out, d_in))
    return ProjectionHead(W=W)


@dataclass
class Encoder:
    backbone: BackboneSpec
    head: ProjectionHead

    def __post_init__(self):
        if self.head.d_in != self.backbone.dim:
            raise ConfigError(
                f"head expects d_in={self.head.d_in} but backbone dim={self.backbone.dim}"
            )


@lru_cache(maxsize=None)
def _ngram_hash(gram: str, seed: int) -> int:
    key = seed.to_bytes(8, "little", signed=True)
    digest = hashlib.blake2b(gram.encode("utf-8"), key=key, digest_size=9).digest()
    return int.from_bytes(digest, "little")


def _hash_ngram_vector(text: str, spec: BackboneSpec) -> np.ndarray:
    vec = np.zeros(spec.dim)
    text = text.lower()
    for n in range(spec.ngram_min, spec.ngram_max + 1):
        for i in range(len(text) - n + 1):
            h = _ngram_hash(text[i : i + n], spec.seed)
            idx = (h & 0xFFFFFFFFFFFFFFFF) % spec.dim
            sign = 1.0 if (h >> 64) & 1 else -1.0
            vec[idx] += sign
    return vec


def _normalize(vec: np.ndarray, what: str) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0 or not np.isfinite(norm):
        raise DegenerateInputError(f"{what} produced a zero or non-finite vector")
    return vec / norm


def embed_backbone(sequence: LogSequence, spec: BackboneSpec) -> np.ndarray:
    """Unit-norm backbone vector for one sequence; pure function of (text, spec)."""
    text = sequence.joined_text(MESSAGE_SEPARATOR)
    if spec.kind == "hash_ngram":
        vec = _hash_ngram_vector(text, spec)
        return _normalize(vec, f"sequence {sequence.id}")
    vecs = embed_remote([text], spec)
    return vecs[0]


def embed_remote(texts: list[str], spec: BackboneSpec) -> np.ndarray:
    """POST the OpenAI-compatible embeddings request; returns unit-norm rows."""
    import requests

    headers = {"Content-Type": "application/json"}
    token = os.environ.get(AUTH_TOKEN_ENV, "")
    if token:
        headers["Authorization"] = f"Bearer {token}"
    try:
        resp = requests.post(
            spec.endpoint,
            json={"model": spec.model, "input": texts},
            headers=headers,
            timeout=spec.timeout,
        )
        resp.raise_for_status()
        payload = resp.json()
    except Exception as exc:
        raise TransportError(f"embedding request failed: {exc}") from exc
    rows = [item["embedding"] for item in payload["data"]]
    out = np.asarray(rows, dtype=float)
    if out.shape[0] != len(texts):
        raise TransportError(f"expected {len(texts)} embeddings, got {out.shape[0]}")
    return np.stack([_normalize(row, "remote embedding") for row in out])


def project(x: np.ndarray, head: ProjectionHead) -> np.ndarray:
    """normalize(W @ x); the head stage of encode()."""
    u = head.W @ x
    return _normalize(u, "projection")


def encode(sequence: LogSequence, encoder: Encoder) -> np.ndarray:
    """Full encoder: backbone then projection head, unit-norm output."""
    return project(embed_backbone(sequence, encoder.backbone), encoder.head)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    if u.shape != v.shape:
        raise DegenerateInputError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine similarity of a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def backbone_fingerprint(spec: BackboneSpec) -> str:
    blob = json.dumps(
        {
            "kind": spec.kind,
            "ngram_min": spec.ngram_min,
            "ngram_max": spec.ngram_max,
            "dim": spec.dim,
            "seed": spec.seed,
            "endpoint": spec.endpoint,
            "model": spec.model,
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def head_fingerprint(head: ProjectionHead) -> str:
    h = hashlib.sha256()
    h.update(str(head.W.shape).encode())
    h.update(np.ascontiguousarray(head.W).tobytes())
    return h.hexdigest()


def encoder_fingerprint(encoder: Encoder) -> str:
    return f"{backbone_fingerprint(encoder.backbone)}:{head_fingerprint(encoder.head)}"


@dataclass
class EmbeddingStore:
    """Encoded vectors keyed by sequence id, stamped with the encoder fingerprint."""

    ids: list[str]
    vectors: np.ndarray
    fingerprint: str
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {sid: i for i, sid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, seq_id: str) -> bool:
        return seq_id in self._index

    def vector(self, seq_id: str) -> np.ndarray:
        return self.vectors[self._index[seq_id]]


def save_embedding_store(store: EmbeddingStore, path) -> None:
    np.savez(
        path,
        ids=np.array(store.ids),
        vectors=store.vectors,
        fingerprint=np.array(store.fingerprint),
        d=np.array(store.vectors.shape[1]),
        count=np.array(len(store.ids)),
    )


def load_embedding_store(path, expected_fingerprint: str) -> EmbeddingStore:
    with np.load(path, allow_pickle=False) as data:
        fingerprint = str(data["fingerprint"])
        if fingerprint != expected_fingerprint:
            raise CacheInvalidError(
                f"embedding cache fingerprint {fingerprint[:12]}... does not match "
                f"current encoder {expected_fingerprint[:12]}..."
            )
        return EmbeddingStore(
            ids=[str(s) for s in data["ids"]],
            vectors=data["vectors"],
            fingerprint=fingerprint,
        )


def embed_corpus(corpus: Corpus, encoder: Encoder, cache_path=None) -> EmbeddingStore:
    """One encoded vector per sequence, with an optional fingerprint-keyed cache.

    A cache whose fingerprint matches the current encoder is reloaded without
    touching the backbone; a stale cache is recomputed and overwritten.
    """
    if len(corpus) == 0:
        raise DegenerateInputError("cannot embed an empty corpus")
    fingerprint = encoder_fingerprint(encoder)
    if cache_path is not None and os.path.exists(cache_path):
        try:
            return load_embedding_store(cache_path, fingerprint)
        except CacheInvalidError:
            pass
    ids = [seq.id for seq in corpus]
    vectors = np.stack([encode(seq, encoder) for seq in corpus])
    store = EmbeddingStore(ids=ids, vectors=vectors, fingerprint=fingerprint)
    if cache_path is not None:
        save_embedding_store(store, cache_path)
    return store


REMOTE_EMBED_BATCH = 64


def embed_corpus_backbone(corpus: Corpus, spec: BackboneSpec, cache_path=None) -> EmbeddingStore:
    """Backbone-only vectors (head-independent), cached by backbone fingerprint.

    Training and repeated head application reuse these without re-hashing.
    Remote backbones are called in batches rather than per sequence.
    """
    if len(corpus) == 0:
        raise DegenerateInputError("cannot embed an empty corpus")
    fingerprint = backbone_fingerprint(spec)
    if cache_path is not None and os.path.exists(cache_path):
        try:
            return load_embedding_store(cache_path, fingerprint)
        except CacheInvalidError:
            pass
    ids = [seq.id for seq in corpus]
    if spec.kind == "remote":
        texts = [seq.joined_text(MESSAGE_SEPARATOR) for seq in corpus]
        chunks = [
            embed_remote(texts[i : i + REMOTE_EMBED_BATCH], spec)
            for i in range(0, len(texts), REMOTE_EMBED_BATCH)
        ]
        vectors = np.vstack(chunks)
    else:
        vectors = np.stack([embed_backbone(seq, spec) for seq in corpus])
    store = EmbeddingStore(ids=ids, vectors=vectors, fingerprint=fingerprint)
    if cache_path is not None:
        save_embedding_store(store, cache_path)
    return store


def apply_head(store: EmbeddingStore, head: ProjectionHead) -> EmbeddingStore:
    """Project a backbone store through a head, renormalizing each row."""
    U = store.vectors @ head.W.T
    norms = np.linalg.norm(U, axis=1, keepdims=True)
    if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
        raise DegenerateInputError("projection produced a zero or non-finite vector")
    return EmbeddingStore(
        ids=list(store.ids),
        vectors=U / norms,
        fingerprint=f"{store.fingerprint}:{head_fingerprint(head)}",
    )
