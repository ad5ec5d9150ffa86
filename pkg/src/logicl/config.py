"""Pipeline configuration: TOML/JSON loading, defaults, validation, builders.

One file drives all stages. Validation collects every violation with its
field path instead of stopping at the first.
"""

import json
import re
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .embedding import BackboneSpec, Encoder, ProjectionHead, init_head
from .errors import ConfigError
from .inference import InferenceConfig
from .oracle import MockOracleParams, OracleSpec, RemoteOracleParams
from .training import LossWeights, TrainConfig

# Window sizes matching the supercomputing-log conventions this pipeline
# targets; HDFS-style datasets group by session instead.
DATASET_WINDOW_SIZES = {"bgl": 40, "thunderbird": 40, "tb": 40, "liberty": 30}


def default_window_size(dataset_name: str) -> int:
    return DATASET_WINDOW_SIZES.get(dataset_name.lower(), 40)


DEFAULT_CONFIG = {
    "seed": 0,
    "dataset": {
        "kind": "synthetic",
        "synthetic": {"seed": 7},
        "jsonl": {"train_path": "", "test_path": ""},
        "raw": [],
    },
    "encoder": {
        "kind": "hash_ngram",
        "ngram_min": 3,
        "ngram_max": 5,
        "dim": 384,
        "seed": 0,
        "endpoint": "",
        "model": "",
        "timeout": 30.0,
        "head": {"d_out": 0, "init_noise": 1e-3},  # d_out 0 means "same as dim"
    },
    "oracle": {
        "kind": "mock",
        "mock_fixture": "",
        "mock": {"bias": 0.0, "keyword_weights": {}, "concepts": {}, "demo_gain": 2.0},
        "remote": {
            "endpoint": "",
            "model": "",
            "temperature": 0.0,
            "max_retries": 3,
            "timeout": 60.0,
        },
    },
    "retrieve": {"mmr_lambda": 0.7},
    "delta": {"k_candidates": 128, "checkpoint_every": 100},
    "train": {
        "tau": 0.1,
        "theta": 0.1,
        "epsilon": 1e-8,
        "sim_floor": 1e-4,
        "learning_rate": 0.01,
        "epochs": 20,
        "batch_source": 16,
        "batch_target": 16,
        "kernel_bandwidth": "median",
        "mmd_squared": False,
        "epoch_delta_pass": False,
        "source_domain": "",
        "target_domain": "",
        "weights": {
            "lambda_mmd": 0.1,
            "lambda_supcon": 1.0,
            "lambda_delta": 1.0,
            "lambda_delta_neg": 1.0,
        },
    },
    "infer": {
        "top_i": 4,
        "top_j": 4,
        "threshold": 0.5,
        "cot_enabled": False,
        "failed_as_normal": False,
        "max_failure_ratio": 0.5,
    },
    "output": {"state_dir": "runs/default", "deterministic_report": False},
}

_RAW_ENTRY_DEFAULTS = {
    "name": "",
    "path": "",
    "domain": "",
    "grouping": "window",
    "window_size": 0,  # 0 means "use the dataset-name default"
    "drop_partial": False,
    "key_pattern": "",
    "anomaly_pattern": "",
    "anomaly_negate": False,
    "rules": [],
    "train_count": 0,
    "test_count": 0,
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    """Parse TOML or JSON and merge onto the defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_bytes()
    if path.suffix == ".json":
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: JSON parse error at line {exc.lineno}: {exc.msg}") from exc
    else:
        try:
            user = tomllib.loads(text.decode("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: TOML parse error: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be a table/object")
    cfg = _deep_merge(DEFAULT_CONFIG, user)
    cfg["dataset"]["raw"] = [
        _deep_merge(_RAW_ENTRY_DEFAULTS, entry) for entry in cfg["dataset"].get("raw", [])
    ]
    return cfg


def validate_config_dict(cfg: dict) -> list[str]:
    """Every constraint checked; returns violations as "path: problem" lines."""
    v: list[str] = []

    def check(cond, path, problem):
        if not cond:
            v.append(f"{path}: {problem}")

    enc = cfg["encoder"]
    check(enc["kind"] in ("hash_ngram", "remote"), "encoder.kind", f"unknown kind {enc['kind']!r}")
    check(enc["dim"] >= 2, "encoder.dim", "must be >= 2")
    check(enc["ngram_min"] <= enc["ngram_max"], "encoder.ngram_min", "must be <= ngram_max")
    check(enc["head"]["d_out"] >= 0, "encoder.head.d_out", "must be >= 0 (0 = same as dim)")
    if enc["kind"] == "remote":
        check(bool(enc["endpoint"]), "encoder.endpoint", "required for a remote backbone")

    ora = cfg["oracle"]
    check(ora["kind"] in ("mock", "remote"), "oracle.kind", f"unknown kind {ora['kind']!r}")
    if ora["kind"] == "remote":
        check(bool(ora["remote"]["endpoint"]), "oracle.remote.endpoint", "required for a remote oracle")
    check(ora["remote"]["temperature"] >= 0, "oracle.remote.temperature", "must be >= 0")
    check(ora["remote"]["max_retries"] >= 0, "oracle.remote.max_retries", "must be >= 0")
    if ora["mock_fixture"]:
        check(Path(ora["mock_fixture"]).exists(), "oracle.mock_fixture", "file does not exist")

    check(0.0 <= cfg["retrieve"]["mmr_lambda"] <= 1.0, "retrieve.mmr_lambda", "must be in [0, 1]")
    check(cfg["delta"]["k_candidates"] >= 1, "delta.k_candidates", "must be >= 1")
    check(cfg["delta"]["checkpoint_every"] >= 1, "delta.checkpoint_every", "must be >= 1")

    tr = cfg["train"]
    check(tr["tau"] > 0, "train.tau", "must be > 0")
    check(tr["theta"] >= 0, "train.theta", "must be >= 0")
    check(tr["epsilon"] >= 0, "train.epsilon", "must be >= 0")
    check(tr["sim_floor"] > 0, "train.sim_floor", "must be > 0")
    check(tr["learning_rate"] >= 0, "train.learning_rate", "must be >= 0")
    check(tr["epochs"] >= 1, "train.epochs", "must be >= 1")
    check(tr["batch_source"] >= 1, "train.batch_source", "must be >= 1")
    check(tr["batch_target"] >= 1, "train.batch_target", "must be >= 1")
    if tr["kernel_bandwidth"] != "median":
        try:
            check(float(tr["kernel_bandwidth"]) > 0, "train.kernel_bandwidth", "must be > 0")
        except (TypeError, ValueError):
            v.append("train.kernel_bandwidth: must be \"median\" or a positive number")
    for name, value in tr["weights"].items():
        check(value >= 0, f"train.weights.{name}", "must be >= 0")

    inf = cfg["infer"]
    check(inf["top_i"] >= 1, "infer.top_i", "must be >= 1")
    check(inf["top_j"] >= 0, "infer.top_j", "must be >= 0")
    check(0.0 < inf["threshold"] < 1.0, "infer.threshold", "must be inside the open interval (0, 1)")
    check(0.0 <= inf["max_failure_ratio"] <= 1.0, "infer.max_failure_ratio", "must be in [0, 1]")

    ds = cfg["dataset"]
    check(ds["kind"] in ("synthetic", "jsonl", "raw"), "dataset.kind", f"unknown kind {ds['kind']!r}")
    if ds["kind"] == "jsonl":
        for key in ("train_path", "test_path"):
            path = ds["jsonl"][key]
            check(bool(path), f"dataset.jsonl.{key}", "required")
            if path:
                check(Path(path).exists(), f"dataset.jsonl.{key}", f"{path} does not exist")
    if ds["kind"] == "raw":
        check(len(ds["raw"]) > 0, "dataset.raw", "at least one entry required")
    for i, entry in enumerate(ds.get("raw", [])):
        prefix = f"dataset.raw[{i}]"
        check(bool(entry["path"]), f"{prefix}.path", "required")
        if entry["path"]:
            check(Path(entry["path"]).exists(), f"{prefix}.path", f"{entry['path']} does not exist")
        check(bool(entry["domain"]), f"{prefix}.domain", "required")
        check(entry["grouping"] in ("session", "window"), f"{prefix}.grouping", "session or window")
        check(entry["window_size"] >= 0, f"{prefix}.window_size", "must be >= 0 (0 = dataset default)")
        if entry["grouping"] == "session":
            check(bool(entry["key_pattern"]), f"{prefix}.key_pattern", "required for session grouping")
            if entry["key_pattern"]:
                try:
                    check(
                        re.compile(entry["key_pattern"]).groups >= 1,
                        f"{prefix}.key_pattern",
                        "needs one capture group",
                    )
                except re.error as exc:
                    v.append(f"{prefix}.key_pattern: invalid regex: {exc}")
        if entry["anomaly_pattern"]:
            try:
                re.compile(entry["anomaly_pattern"])
            except re.error as exc:
                v.append(f"{prefix}.anomaly_pattern: invalid regex: {exc}")
        for j, rule in enumerate(entry["rules"]):
            if not (isinstance(rule, (list, tuple)) and len(rule) == 2):
                v.append(f"{prefix}.rules[{j}]: must be a (pattern, replacement) pair")
                continue
            try:
                re.compile(rule[0])
            except re.error as exc:
                v.append(f"{prefix}.rules[{j}]: invalid regex: {exc}")
        check(entry["train_count"] >= 0, f"{prefix}.train_count", "must be >= 0")
        check(entry["test_count"] >= 0, f"{prefix}.test_count", "must be >= 0")

    check(bool(cfg["output"]["state_dir"]), "output.state_dir", "required")
    return v


def validate_config(path) -> list[str]:
    """Load and validate; parse failures raise, constraint failures are returned."""
    return validate_config_dict(load_config(path))


# ---------------------------------------------------------------------------
# Typed builders
# ---------------------------------------------------------------------------


def backbone_spec_from(cfg: dict) -> BackboneSpec:
    enc = cfg["encoder"]
    return BackboneSpec(
        kind=enc["kind"],
        ngram_min=enc["ngram_min"],
        ngram_max=enc["ngram_max"],
        dim=enc["dim"],
        seed=enc["seed"],
        endpoint=enc["endpoint"],
        model=enc["model"],
        timeout=enc["timeout"],
    )


def initial_head_from(cfg: dict) -> ProjectionHead:
    enc = cfg["encoder"]
    d_out = enc["head"]["d_out"] or enc["dim"]
    return init_head(enc["dim"], d_out, seed=cfg["seed"], noise=enc["head"]["init_noise"])


def initial_encoder_from(cfg: dict) -> Encoder:
    return Encoder(backbone=backbone_spec_from(cfg), head=initial_head_from(cfg))


def oracle_spec_from(cfg: dict) -> OracleSpec:
    ora = cfg["oracle"]
    mock = dict(ora["mock"])
    if ora["mock_fixture"]:
        with open(ora["mock_fixture"], encoding="utf-8") as fh:
            mock = _deep_merge(mock, json.load(fh))
    return OracleSpec(
        kind=ora["kind"],
        mock=MockOracleParams(
            bias=mock["bias"],
            keyword_weights=dict(mock["keyword_weights"]),
            concepts=dict(mock["concepts"]),
            demo_gain=mock["demo_gain"],
        ),
        remote=RemoteOracleParams(
            endpoint=ora["remote"]["endpoint"],
            model=ora["remote"]["model"],
            temperature=ora["remote"]["temperature"],
            max_retries=ora["remote"]["max_retries"],
            timeout=ora["remote"]["timeout"],
        ),
    )


def train_config_from(cfg: dict) -> TrainConfig:
    tr = cfg["train"]
    return TrainConfig(
        tau=tr["tau"],
        theta=tr["theta"],
        epsilon=tr["epsilon"],
        sim_floor=tr["sim_floor"],
        learning_rate=tr["learning_rate"],
        epochs=tr["epochs"],
        batch_source=tr["batch_source"],
        batch_target=tr["batch_target"],
        kernel_bandwidth=tr["kernel_bandwidth"],
        mmd_squared=tr["mmd_squared"],
        epoch_delta_pass=tr["epoch_delta_pass"],
        seed=cfg["seed"],
        source_domain=tr["source_domain"] or None,
        target_domain=tr["target_domain"] or None,
    )


def loss_weights_from(cfg: dict) -> LossWeights:
    w = cfg["train"]["weights"]
    return LossWeights(
        lambda_mmd=w["lambda_mmd"],
        lambda_supcon=w["lambda_supcon"],
        lambda_delta=w["lambda_delta"],
        lambda_delta_neg=w["lambda_delta_neg"],
    )


def infer_config_from(cfg: dict) -> InferenceConfig:
    inf = cfg["infer"]
    return InferenceConfig(
        top_i=inf["top_i"],
        top_j=inf["top_j"],
        threshold=inf["threshold"],
        cot_enabled=inf["cot_enabled"],
        failed_as_normal=inf["failed_as_normal"],
        max_failure_ratio=inf["max_failure_ratio"],
    )
