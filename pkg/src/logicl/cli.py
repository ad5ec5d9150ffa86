"""Pipeline driver: prepare -> embed -> build-delta -> train -> detect -> eval.

Each stage reads and writes artifacts under a state directory, stamps them
with input fingerprints, and skips itself when nothing changed. Flags
override environment overrides override the config file.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as config_mod
from .corpus import (
    Corpus,
    RawLogLine,
    chronological_split,
    compile_rules,
    group_by_session,
    group_by_window,
    load_corpus_jsonl,
    preprocess_line,
    save_corpus_jsonl,
)
from .delta import build_delta_matrix, load_matrix
from .embedding import (
    Encoder,
    ProjectionHead,
    apply_head,
    backbone_fingerprint,
    embed_corpus_backbone,
    encoder_fingerprint,
    head_fingerprint,
)
from .errors import ConfigError, LogiclError, MissingArtifactError
from .inference import PipelineState, detect_batch, load_predictions, save_predictions
from .metrics import compute_metrics, export_alignment_matrices, write_report
from .oracle import oracle_fingerprint
from .retrieval import MMRParams, RetrievalIndex, mmr_select, top_k_similar
from .synthetic import make_synthetic_corpus
from .training import train_encoder, write_loss_trace

logger = logging.getLogger(__name__)

STAGES = ("prepare", "embed", "build-delta", "train", "detect", "eval")


def _hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _hash_json(obj) -> str:
    return _hash_bytes(json.dumps(obj, sort_keys=True).encode("utf-8"))


def _hash_file(path: Path) -> str:
    return _hash_bytes(path.read_bytes())


def _read_stamp(path: Path):
    if path.exists():
        try:
            return json.loads(path.read_text())
        except json.JSONDecodeError:
            return None
    return None


def _write_stamp(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True) + "\n")


def _require(path: Path, missing_stage: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{path.name} not found; run {missing_stage} first")
    return path


class Pipeline:
    """One configured run rooted at a state directory."""

    def __init__(self, cfg: dict, state_dir: Path, train_override=None, test_override=None):
        self.cfg = cfg
        self.sd = Path(state_dir)
        self.sd.mkdir(parents=True, exist_ok=True)
        self.timings: dict[str, float] = {}
        self._train_override = Path(train_override) if train_override else None
        self._test_override = Path(test_override) if test_override else None

    # -- artifact paths ----------------------------------------------------
    @property
    def train_path(self) -> Path:
        return self._train_override or self.sd / "train.jsonl"

    @property
    def test_path(self) -> Path:
        return self._test_override or self.sd / "test.jsonl"

    @property
    def backbone_path(self) -> Path:
        return self.sd / "backbone_train.npz"

    @property
    def matrix_path(self) -> Path:
        return self.sd / "delta.matrix"

    @property
    def head_path(self) -> Path:
        return self.sd / "head.npz"

    def run(self, stage: str, resume: bool = False) -> None:
        stages = STAGES if stage == "all" else (stage,)
        for name in stages:
            started = time.perf_counter()
            getattr(self, "stage_" + name.replace("-", "_"))(resume=resume)
            self.timings[name] = time.perf_counter() - started

    # -- stages --------------------------------------------------------------
    def stage_prepare(self, resume: bool = False) -> None:
        if self._train_override and self._test_override:
            _require(self.train_path, "nothing (the --train override is missing)")
            _require(self.test_path, "nothing (the --test override is missing)")
            logger.info("prepare: using corpus overrides")
            return
        ds = self.cfg["dataset"]
        stamp_path = self.sd / "prepare.stamp.json"
        fingerprint = _hash_json(ds)
        stamp = _read_stamp(stamp_path)
        if (
            stamp
            and stamp.get("dataset") == fingerprint
            and self.train_path.exists()
            and self.test_path.exists()
        ):
            logger.info("prepare: up to date")
            return

        if ds["kind"] == "synthetic":
            train, test, _ = make_synthetic_corpus(seed=ds["synthetic"]["seed"])
        elif ds["kind"] == "jsonl":
            train = load_corpus_jsonl(ds["jsonl"]["train_path"])
            test = load_corpus_jsonl(ds["jsonl"]["test_path"])
        else:
            train, test = self._prepare_raw(ds["raw"])
        save_corpus_jsonl(train, self.sd / "train.jsonl")
        save_corpus_jsonl(test, self.sd / "test.jsonl")
        _write_stamp(stamp_path, {"dataset": fingerprint, "train": len(train), "test": len(test)})
        logger.info("prepare: %d train / %d test sequences", len(train), len(test))

    def _prepare_raw(self, entries) -> tuple[Corpus, Corpus]:
        import re

        train_seqs, test_seqs = [], []
        for entry in entries:
            rules = compile_rules(entry["rules"])
            anomaly = re.compile(entry["anomaly_pattern"]) if entry["anomaly_pattern"] else None
            lines = []
            with open(entry["path"], encoding="utf-8", errors="replace") as fh:
                for line_no, raw in enumerate(fh, start=1):
                    raw = raw.rstrip("\n")
                    if not raw.strip():
                        continue
                    label = None
                    if anomaly is not None:
                        matched = bool(anomaly.search(raw))
                        label = int(matched != entry["anomaly_negate"])
                    lines.append(
                        RawLogLine(line_no=line_no, text=preprocess_line(raw, rules), label=label)
                    )
            if entry["grouping"] == "session":
                seqs = group_by_session(lines, entry["key_pattern"], entry["domain"])
            else:
                window = entry["window_size"] or config_mod.default_window_size(entry["name"])
                seqs = group_by_window(lines, window, entry["domain"], entry["drop_partial"])
            corpus = Corpus(seqs)
            train_count = entry["train_count"] or len(corpus) - entry["test_count"]
            sub_train, sub_test = chronological_split(corpus, train_count, entry["test_count"])
            train_seqs.extend(sub_train.sequences)
            test_seqs.extend(sub_test.sequences)
        return Corpus(train_seqs), Corpus(test_seqs)

    def stage_embed(self, resume: bool = False) -> None:
        _require(self.train_path, "prepare")
        spec = config_mod.backbone_spec_from(self.cfg)
        fingerprint = {
            "backbone": backbone_fingerprint(spec),
            "corpus": _hash_file(self.train_path),
        }
        stamp_path = self.sd / "embed.stamp.json"
        if _read_stamp(stamp_path) == fingerprint and self.backbone_path.exists():
            logger.info("embed: cache hit")
            return
        if self.backbone_path.exists():
            self.backbone_path.unlink()
        corpus = load_corpus_jsonl(self.train_path)
        store = embed_corpus_backbone(corpus, spec, cache_path=self.backbone_path)
        _write_stamp(stamp_path, fingerprint)
        logger.info("embed: %d vectors of dim %d", len(store), store.vectors.shape[1])

    def stage_build_delta(self, resume: bool = False) -> None:
        _require(self.train_path, "prepare")
        _require(self.backbone_path, "embed")
        corpus = load_corpus_jsonl(self.train_path)
        encoder = config_mod.initial_encoder_from(self.cfg)
        oracle_spec = config_mod.oracle_spec_from(self.cfg)
        enc_fp = encoder_fingerprint(encoder)
        ora_fp = oracle_fingerprint(oracle_spec)
        k = self.cfg["delta"]["k_candidates"]

        if self.matrix_path.exists():
            existing = load_matrix(self.matrix_path, encoder_fp=enc_fp, oracle_fp=ora_fp)
            if (
                not existing.partial
                and not existing.fingerprint_warnings
                and existing.n == len(corpus)
                and existing.k_candidates == k
            ):
                logger.info("build-delta: up to date")
                return
            if existing.partial and not resume:
                raise ConfigError(
                    f"{self.matrix_path} is a partial checkpoint; pass --resume to continue "
                    "or delete it to restart"
                )
            if not existing.partial or existing.fingerprint_warnings:
                self.matrix_path.unlink()

        spec = config_mod.backbone_spec_from(self.cfg)
        bstore = embed_corpus_backbone(corpus, spec, cache_path=self.backbone_path)
        store = apply_head(bstore, encoder.head)
        matrix = build_delta_matrix(
            corpus,
            encoder,
            oracle_spec,
            k_candidates=k,
            mmr_lambda=self.cfg["retrieve"]["mmr_lambda"],
            store=store,
            checkpoint_path=self.matrix_path,
            checkpoint_every=self.cfg["delta"]["checkpoint_every"],
        )
        logger.info("build-delta: %d entries over %d queries", matrix.entry_count(), matrix.n)

    def stage_train(self, resume: bool = False) -> None:
        _require(self.train_path, "prepare")
        _require(self.backbone_path, "embed")
        _require(self.matrix_path, "build-delta")
        corpus = load_corpus_jsonl(self.train_path)
        encoder = config_mod.initial_encoder_from(self.cfg)
        matrix = load_matrix(self.matrix_path, encoder_fp=encoder_fingerprint(encoder))
        if matrix.partial:
            raise MissingArtifactError("delta matrix is a partial checkpoint; run build-delta first")

        fingerprint = {
            "matrix": _hash_file(self.matrix_path),
            "train": self.cfg["train"],
            "seed": self.cfg["seed"],
            "corpus": _hash_file(self.train_path),
        }
        stamp_path = self.sd / "train.stamp.json"
        if (
            _read_stamp(stamp_path) == json.loads(json.dumps(fingerprint))
            and self.head_path.exists()
        ):
            logger.info("train: up to date")
            return

        spec = config_mod.backbone_spec_from(self.cfg)
        bstore = embed_corpus_backbone(corpus, spec, cache_path=self.backbone_path)
        head, trace = train_encoder(
            corpus,
            matrix,
            encoder,
            config_mod.loss_weights_from(self.cfg),
            config_mod.train_config_from(self.cfg),
            backbone_store=bstore,
        )
        np.savez(
            self.head_path,
            W=head.W,
            base_fingerprint=np.array(encoder_fingerprint(encoder)),
        )
        write_loss_trace(trace, self.sd / "loss_trace.csv")
        _write_stamp(stamp_path, fingerprint)
        logger.info("train: %d epochs, final loss %.6f", len(trace), trace[-1].l_total)

    def _trained_encoder(self) -> Encoder:
        _require(self.head_path, "train")
        with np.load(self.head_path, allow_pickle=False) as data:
            head = ProjectionHead(W=data["W"])
        return Encoder(backbone=config_mod.backbone_spec_from(self.cfg), head=head)

    def stage_detect(self, resume: bool = False) -> None:
        _require(self.train_path, "prepare")
        _require(self.test_path, "prepare")
        _require(self.backbone_path, "embed")
        _require(self.matrix_path, "build-delta")
        encoder = self._trained_encoder()
        oracle_spec = config_mod.oracle_spec_from(self.cfg)
        infer_cfg = config_mod.infer_config_from(self.cfg)

        fingerprint = {
            "head": head_fingerprint(encoder.head),
            "infer": self.cfg["infer"],
            "test": _hash_file(self.test_path),
            "oracle": oracle_fingerprint(oracle_spec),
        }
        stamp_path = self.sd / "detect.stamp.json"
        predictions_path = self.sd / "predictions.jsonl"
        if (
            _read_stamp(stamp_path) == json.loads(json.dumps(fingerprint))
            and predictions_path.exists()
        ):
            logger.info("detect: up to date")
            return

        train_corpus = load_corpus_jsonl(self.train_path)
        test_corpus = load_corpus_jsonl(self.test_path)
        initial_fp = encoder_fingerprint(config_mod.initial_encoder_from(self.cfg))
        matrix = load_matrix(self.matrix_path, encoder_fp=initial_fp, oracle_fp=fingerprint["oracle"])
        spec = config_mod.backbone_spec_from(self.cfg)
        bstore = embed_corpus_backbone(train_corpus, spec, cache_path=self.backbone_path)
        index = RetrievalIndex.from_store(apply_head(bstore, encoder.head))
        state = PipelineState(
            encoder=encoder,
            train_corpus=train_corpus,
            index=index,
            matrix=matrix,
            oracle_spec=oracle_spec,
        )
        predictions = detect_batch(test_corpus, state, infer_cfg)
        save_predictions(predictions, predictions_path)
        _write_stamp(stamp_path, fingerprint)
        failed = sum(1 for p in predictions if p.failed)
        logger.info("detect: %d predictions, %d failed", len(predictions), failed)

    def stage_eval(self, resume: bool = False) -> None:
        predictions_path = _require(self.sd / "predictions.jsonl", "detect")
        _require(self.test_path, "prepare")
        _require(self.train_path, "prepare")
        _require(self.matrix_path, "build-delta")
        predictions = load_predictions(predictions_path)
        test_corpus = load_corpus_jsonl(self.test_path)
        labels = {seq.id: seq.label for seq in test_corpus}
        metrics = compute_metrics(
            predictions, labels, failed_as_normal=self.cfg["infer"]["failed_as_normal"]
        )

        train_corpus = load_corpus_jsonl(self.train_path)
        spec = config_mod.backbone_spec_from(self.cfg)
        bstore = embed_corpus_backbone(train_corpus, spec, cache_path=self.backbone_path)
        matrix = load_matrix(self.matrix_path)
        domains = []
        for seq in train_corpus:
            if seq.domain not in domains:
                domains.append(seq.domain)
        src_domain = self.cfg["train"]["source_domain"] or domains[0]
        tgt_domain = self.cfg["train"]["target_domain"] or (domains[-1] if domains else src_domain)
        source_ids = [s.id for s in train_corpus if s.domain == src_domain]
        target_ids = [s.id for s in train_corpus if s.domain == tgt_domain]
        # Lexical-similarity panel uses raw backbone geometry; the paired
        # panel holds the learned utility scores on the same grid.
        export_alignment_matrices(
            source_ids,
            target_ids,
            bstore,
            matrix,
            self.sd / "alignment_similarity.csv",
            self.sd / "alignment_delta.csv",
        )

        encoder = self._trained_encoder()
        timing = dict(self.timings)
        timing["eval"] = timing.get("eval", 0.0)
        if self.cfg["output"]["deterministic_report"]:
            timing = {stage: 0.0 for stage in timing}
        # The snapshot captures the experiment, not where its artifacts live,
        # so identical runs in different state dirs produce identical reports.
        snapshot = {k: v for k, v in self.cfg.items() if k != "output"}
        if "overrides_applied" in snapshot:
            snapshot["overrides_applied"] = {
                k: v
                for k, v in snapshot["overrides_applied"].items()
                if not k.startswith("output.")
            }
        report = write_report(
            metrics,
            snapshot,
            self.sd / "report.json",
            fingerprints={
                "backbone": backbone_fingerprint(spec),
                "initial_encoder": encoder_fingerprint(config_mod.initial_encoder_from(self.cfg)),
                "trained_head": head_fingerprint(encoder.head),
                "oracle": oracle_fingerprint(config_mod.oracle_spec_from(self.cfg)),
                "delta_matrix": _hash_file(self.matrix_path),
            },
            timing=timing,
        )
        logger.info(
            "eval: P=%.4f R=%.4f F1=%.4f (failed=%d)",
            report["metrics"]["precision"],
            report["metrics"]["recall"],
            report["metrics"]["f1"],
            report["metrics"]["failed"],
        )

    # -- debugging helpers ---------------------------------------------------
    def debug_retrieve(self, query_id: str, k: int, mmr_lambda: float) -> dict:
        _require(self.train_path, "prepare")
        _require(self.backbone_path, "embed")
        corpus = load_corpus_jsonl(self.train_path)
        spec = config_mod.backbone_spec_from(self.cfg)
        bstore = embed_corpus_backbone(corpus, spec, cache_path=self.backbone_path)
        head = (
            self._trained_encoder().head
            if self.head_path.exists()
            else config_mod.initial_head_from(self.cfg)
        )
        store = apply_head(bstore, head)
        if query_id not in store:
            raise ConfigError(f"query id {query_id} not in the training corpus")
        query = store.vector(query_id)
        index = RetrievalIndex.from_store(store, exclude={query_id})
        return {
            "query_id": query_id,
            "top_k": [
                {"id": sid, "similarity": sim} for sid, sim in top_k_similar(query, index, k)
            ],
            "mmr": mmr_select(query, index, MMRParams(lam=mmr_lambda, k=k)),
        }


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; keep 2 for
        # missing artifacts only.
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="logicl", description=__doc__)
    parser.add_argument("command", choices=list(STAGES) + ["all", "retrieve", "validate-config"])
    parser.add_argument("--config", default=None, help="TOML or JSON pipeline config")
    parser.add_argument(
        "--state-dir", "--train-state", dest="state_dir", default=None,
        help="run directory for artifacts",
    )
    parser.add_argument("--train", default=None, help="train corpus JSONL overriding the prepared one")
    parser.add_argument("--test", default=None, help="test corpus JSONL overriding the prepared one")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--resume", action="store_true", help="continue a partial delta build")
    parser.add_argument("--candidates", type=int, default=None, help="delta MMR candidate budget")
    parser.add_argument("--checkpoint-every", type=int, default=None)
    parser.add_argument("--top-i", type=int, default=None)
    parser.add_argument("--top-j", type=int, default=None)
    parser.add_argument("--threshold", type=float, default=None)
    parser.add_argument("--cot", action="store_true", help="request chain-of-thought reasoning")
    parser.add_argument("--mmr-lambda", type=float, default=None)
    parser.add_argument("--llm-endpoint", default=None)
    parser.add_argument("--llm-model", default=None)
    parser.add_argument("--llm-timeout", type=float, default=None)
    parser.add_argument("--mock-oracle", default=None, help="JSON fixture with mock rule set")
    parser.add_argument("--query-id", default=None, help="for the retrieve command")
    parser.add_argument("--k", type=int, default=8, help="for the retrieve command")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _apply_overrides(cfg: dict, args) -> dict:
    """Flags beat environment beats file; record what was applied."""
    applied = {}

    def set_path(path: str, value):
        node = cfg
        *heads, last = path.split(".")
        for key in heads:
            node = node[key]
        if node[last] != value:
            node[last] = value
            applied[path] = value

    env = os.environ
    if env.get("LOGICL_STATE_DIR"):
        set_path("output.state_dir", env["LOGICL_STATE_DIR"])
    if env.get("LOGICL_SEED"):
        set_path("seed", int(env["LOGICL_SEED"]))
    if env.get("LOGICL_LLM_ENDPOINT"):
        set_path("oracle.remote.endpoint", env["LOGICL_LLM_ENDPOINT"])
    if env.get("LOGICL_LLM_MODEL"):
        set_path("oracle.remote.model", env["LOGICL_LLM_MODEL"])

    flag_map = {
        "state_dir": ("output.state_dir", args.state_dir),
        "seed": ("seed", args.seed),
        "candidates": ("delta.k_candidates", args.candidates),
        "checkpoint_every": ("delta.checkpoint_every", args.checkpoint_every),
        "top_i": ("infer.top_i", args.top_i),
        "top_j": ("infer.top_j", args.top_j),
        "threshold": ("infer.threshold", args.threshold),
        "mmr_lambda": ("retrieve.mmr_lambda", args.mmr_lambda),
        "llm_endpoint": ("oracle.remote.endpoint", args.llm_endpoint),
        "llm_model": ("oracle.remote.model", args.llm_model),
        "llm_timeout": ("oracle.remote.timeout", args.llm_timeout),
        "mock_oracle": ("oracle.mock_fixture", args.mock_oracle),
    }
    for _, (path, value) in flag_map.items():
        if value is not None:
            set_path(path, value)
    if args.cot:
        set_path("infer.cot_enabled", True)
    if applied:
        cfg["overrides_applied"] = applied
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.config is None:
            raise ConfigError("--config is required")
        if args.command == "validate-config":
            violations = config_mod.validate_config(args.config)
            for line in violations:
                print(line)
            return 1 if violations else 0

        cfg = config_mod.load_config(args.config)
        cfg = _apply_overrides(cfg, args)
        violations = config_mod.validate_config_dict(cfg)
        if violations:
            for line in violations:
                print(line, file=sys.stderr)
            raise ConfigError(f"config has {len(violations)} violation(s)")

        pipeline = Pipeline(
            cfg,
            Path(cfg["output"]["state_dir"]),
            train_override=args.train,
            test_override=args.test,
        )
        if args.command == "retrieve":
            if not args.query_id:
                raise ConfigError("retrieve needs --query-id")
            lam = args.mmr_lambda if args.mmr_lambda is not None else cfg["retrieve"]["mmr_lambda"]
            print(json.dumps(pipeline.debug_retrieve(args.query_id, args.k, lam), indent=2))
            return 0
        pipeline.run(args.command, resume=args.resume)
        return 0
    except LogiclError as exc:
        print(f"logicl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # internal error
        logger.exception("internal error")
        print(f"logicl: internal error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
