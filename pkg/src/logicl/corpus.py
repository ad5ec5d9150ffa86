"""Corpus handling: regex preprocessing, grouping into labeled sequences, splits.

Raw lines are cleaned with ordered regex rules (headers stripped, dynamic
parameters such as IPs and block ids retained), grouped either by a session
key or into fixed non-overlapping windows, and split chronologically.
"""

import json
import logging
import re
from dataclasses import dataclass, field

from .errors import ConfigError, CorpusFormatError, EmptyCorpusError

logger = logging.getLogger(__name__)

_WHITESPACE = re.compile(r"\s+")


@dataclass
class RawLogLine:
    """One raw message with its ordinal position and optional label/session key."""

    line_no: int
    text: str
    label: int | None = None
    session_key: str | None = None


@dataclass
class LogSequence:
    """An ordered group of preprocessed log messages with a domain tag and binary label."""

    id: str
    domain: str
    messages: list[str]
    label: int

    def joined_text(self, separator: str = " ;-; ") -> str:
        return separator.join(self.messages)


@dataclass
class Corpus:
    """Chronologically ordered sequences; domain set is derived from members."""

    sequences: list[LogSequence] = field(default_factory=list)

    def __post_init__(self):
        ids = [s.id for s in self.sequences]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise CorpusFormatError(f"duplicate sequence ids: {dupes[:5]}")

    @property
    def domains(self) -> set[str]:
        return {s.domain for s in self.sequences}

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def by_id(self, seq_id: str) -> LogSequence:
        for s in self.sequences:
            if s.id == seq_id:
                return s
        raise KeyError(seq_id)


def compile_rules(rules) -> list[tuple[re.Pattern, str]]:
    """Compile ordered (pattern, replacement) pairs, failing fast on bad regex."""
    compiled = []
    for i, (pattern, replacement) in enumerate(rules):
        try:
            compiled.append((re.compile(pattern), replacement))
        except re.error as exc:
            raise ConfigError(f"preprocessing rule {i} is not a valid regex: {exc}") from exc
    return compiled


def preprocess_line(raw: str, rules) -> str:
    """Apply regex rules left-to-right, then normalize whitespace.

    Rules may be raw (pattern, replacement) pairs or the output of
    compile_rules. Dynamic parameters are kept; rules should strip only
    headers such as timestamps and line counters.
    """
    text = raw
    for pattern, replacement in rules:
        if isinstance(pattern, str):
            pattern = re.compile(pattern)
        text = pattern.sub(replacement, text)
    return _WHITESPACE.sub(" ", text).strip()


def _any_anomalous(lines) -> int:
    return 1 if any(ln.label == 1 for ln in lines) else 0


def group_by_session(lines, key_pattern, domain: str) -> list[LogSequence]:
    """Group lines sharing a captured session key into one sequence each.

    Lines that do not match the pattern are dropped with a counted warning.
    Sequence label is 1 iff any member line is labeled 1.
    """
    if isinstance(key_pattern, str):
        try:
            key_pattern = re.compile(key_pattern)
        except re.error as exc:
            raise ConfigError(f"session key pattern is not a valid regex: {exc}") from exc
    if key_pattern.groups < 1:
        raise ConfigError("session key pattern needs one capture group")

    groups: dict[str, list[RawLogLine]] = {}
    dropped = 0
    for line in lines:
        m = key_pattern.search(line.text)
        if m is None:
            dropped += 1
            continue
        groups.setdefault(m.group(1), []).append(line)
    if dropped:
        logger.warning("group_by_session: dropped %d lines with no session key", dropped)
    if not groups:
        raise EmptyCorpusError("no line matched the session key pattern")

    return [
        LogSequence(
            id=f"{domain}:{key}",
            domain=domain,
            messages=[ln.text for ln in members],
            label=_any_anomalous(members),
        )
        for key, members in groups.items()
    ]


def group_by_window(lines, window_size: int, domain: str, drop_partial: bool = False) -> list[LogSequence]:
    """Chunk lines into consecutive non-overlapping windows of window_size.

    A trailing partial window is kept unless drop_partial is set, so labeled
    anomalies near the end of a trace are not silently discarded.
    """
    if window_size < 1:
        raise ConfigError(f"window_size must be >= 1, got {window_size}")
    lines = list(lines)
    if not lines:
        raise EmptyCorpusError("no input lines to window")

    sequences = []
    for i, start in enumerate(range(0, len(lines), window_size)):
        chunk = lines[start : start + window_size]
        if drop_partial and len(chunk) < window_size:
            break
        sequences.append(
            LogSequence(
                id=f"{domain}:w{i:06d}",
                domain=domain,
                messages=[ln.text for ln in chunk],
                label=_any_anomalous(chunk),
            )
        )
    if not sequences:
        raise EmptyCorpusError("windowing produced no sequences")
    return sequences


def chronological_split(corpus: Corpus, train_count: int, test_count: int) -> tuple[Corpus, Corpus]:
    """Prefix split: first train_count sequences train, next test_count test."""
    if train_count < 0 or test_count < 0:
        raise ConfigError("split counts must be non-negative")
    if train_count + test_count > len(corpus):
        raise ConfigError(
            f"split counts {train_count}+{test_count} exceed corpus size {len(corpus)}"
        )
    train = Corpus(corpus.sequences[:train_count])
    test = Corpus(corpus.sequences[train_count : train_count + test_count])
    return train, test


_REQUIRED_FIELDS = ("id", "domain", "label", "messages")


def load_corpus_jsonl(path) -> Corpus:
    """Load a corpus from one-JSON-object-per-line; errors cite the line number."""
    sequences = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"malformed JSON at line {line_no}: {exc}") from exc
            for fld in _REQUIRED_FIELDS:
                if fld not in obj:
                    raise CorpusFormatError(f"missing field {fld} at line {line_no}")
            if obj["label"] not in (0, 1):
                raise CorpusFormatError(f"label must be 0 or 1 at line {line_no}")
            if not obj["messages"]:
                raise CorpusFormatError(f"empty messages at line {line_no}")
            sequences.append(
                LogSequence(
                    id=str(obj["id"]),
                    domain=str(obj["domain"]),
                    messages=[str(m) for m in obj["messages"]],
                    label=int(obj["label"]),
                )
            )
    if not sequences:
        raise EmptyCorpusError(f"no sequences in {path}")
    return Corpus(sequences)


def save_corpus_jsonl(corpus: Corpus, path) -> None:
    """Write one JSON object per sequence, UTF-8, LF-terminated."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for seq in corpus:
            fh.write(
                json.dumps(
                    {"id": seq.id, "domain": seq.domain, "label": seq.label, "messages": seq.messages},
                    ensure_ascii=False,
                )
                + "\n"
            )
