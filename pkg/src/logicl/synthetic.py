"""Bundled two-domain synthetic corpus with a matching mock-oracle rule set.

Two systems with word-disjoint vocabularies. Three planted cross-domain
facts drive the fixture:

* routine activity is semantically equivalent across domains ("cron sweep
  complete" on the source side, "pulse steady" on the target side);
* the target's "vproto shard unreachable" failure is equivalent to the
  source's "lease pool exhausted" failure, so only a source demonstration
  of that failure helps the mock oracle classify it;
* the target's "kernel wedge panic" failure is recognizable zero-shot.

The mock oracle only understands demonstrations phrased in source-domain
vocabulary (the cold-start premise: the target system is new to it), which
is what separates delta-guided retrieval from plain nearest neighbors here.
"""

import math

import numpy as np

from .corpus import Corpus, LogSequence
from .oracle import MockOracleParams, OracleSpec

SOURCE_DOMAIN = "aurora"
TARGET_DOMAIN = "zephyr"

_SRC_ROUTINE_KEYED = "aurora cron sweep complete unit u{n}"
_SRC_ROUTINE_PLAIN = [
    "aurora sched heartbeat interval {n}s",
    "aurora relay gate open channel {n}",
    "aurora metrics flush rows {n}",
    "aurora quota scan finished volume v{n}",
    "aurora cache warm segment {n}",
]
_SRC_LEASE = "aurora dhcp lease pool exhausted zone z{n}"
_SRC_PARITY = "aurora raid parity check torn stripe {n}"

_TGT_ROUTINE_KEYED = "zephyr pulse steady node n{n}"
_TGT_ROUTINE_PLAIN = [
    "zephyr tick idle slot {n}",
    "zephyr queue drain depth {n}",
    "zephyr ledger sync page {n}",
    "zephyr fan curve nominal duty {n}",
    "zephyr watchdog feed count {n}",
]
_TGT_SHARD = "zephyr vproto shard unreachable ring r{n}"
_TGT_PANIC = "zephyr kernel wedge panic core {n}"


def make_mock_oracle_spec() -> OracleSpec:
    """Rule set wired to the planted vocabulary above."""
    return OracleSpec(
        kind="mock",
        mock=MockOracleParams(
            bias=-0.4,
            keyword_weights={
                "lease pool exhausted": 2.0,
                "parity check torn": 2.0,
                "kernel wedge panic": 2.0,
            },
            concepts={
                "routine": {
                    "query": ["pulse steady", "cron sweep complete"],
                    "demo": ["cron sweep complete"],
                },
                "resource_exhaustion": {
                    "query": ["vproto shard unreachable", "lease pool exhausted"],
                    "demo": ["lease pool exhausted"],
                },
                "storage_fault": {
                    "query": ["parity check torn"],
                    "demo": ["parity check torn"],
                },
            },
            demo_gain=math.log(9.0),
        ),
    )


def _fill(template: str, rng) -> str:
    return template.replace("{n}", str(int(rng.integers(1, 9999))))


def _normal_sequence(rng, keyed: str, plain: list[str], length: int = 6) -> list[str]:
    msgs = [_fill(keyed, rng)]
    msgs += [_fill(plain[int(rng.integers(len(plain)))], rng) for _ in range(length - 1)]
    order = rng.permutation(length)
    return [msgs[i] for i in order]


def _anomalous_sequence(rng, plain: list[str], fault: str, keyed: str | None, length: int = 6) -> list[str]:
    # Two fault messages; filler avoids the keyed routine template unless asked
    # for, so the fault sequence carries only its own concept.
    filler_count = length - 2 - (1 if keyed else 0)
    msgs = [_fill(fault, rng), _fill(fault, rng)]
    if keyed:
        msgs.append(_fill(keyed, rng))
    msgs += [_fill(plain[int(rng.integers(len(plain)))], rng) for _ in range(filler_count)]
    order = rng.permutation(len(msgs))
    return [msgs[i] for i in order]


def make_synthetic_corpus(seed: int = 7) -> tuple[Corpus, Corpus, OracleSpec]:
    """200 training sequences (140 source + 60 target) and 50 target test ones."""
    rng = np.random.default_rng(seed)
    train: list[LogSequence] = []

    counter = 0

    def add(prefix, domain, messages, label, into):
        nonlocal counter
        into.append(
            LogSequence(id=f"{prefix}{counter:04d}", domain=domain, messages=messages, label=label)
        )
        counter += 1

    # Source: 100 normal, 25 resource-exhaustion faults, 15 storage faults.
    # Fault sequences keep one routine-keyed message, the way production
    # incidents interleave with routine traffic; that interleaving is what
    # makes them interfere with normal queries and earn negative deltas.
    for _ in range(100):
        add("src", SOURCE_DOMAIN, _normal_sequence(rng, _SRC_ROUTINE_KEYED, _SRC_ROUTINE_PLAIN), 0, train)
    for _ in range(25):
        add(
            "src",
            SOURCE_DOMAIN,
            _anomalous_sequence(rng, _SRC_ROUTINE_PLAIN, _SRC_LEASE, _SRC_ROUTINE_KEYED),
            1,
            train,
        )
    for _ in range(15):
        add(
            "src",
            SOURCE_DOMAIN,
            _anomalous_sequence(rng, _SRC_ROUTINE_PLAIN, _SRC_PARITY, _SRC_ROUTINE_KEYED),
            1,
            train,
        )

    # Target few-shot slice: 40 normal, 12 shard faults, 8 panic faults.
    for _ in range(40):
        add("tgt", TARGET_DOMAIN, _normal_sequence(rng, _TGT_ROUTINE_KEYED, _TGT_ROUTINE_PLAIN), 0, train)
    for _ in range(12):
        add("tgt", TARGET_DOMAIN, _anomalous_sequence(rng, _TGT_ROUTINE_PLAIN, _TGT_SHARD, None), 1, train)
    for _ in range(8):
        add("tgt", TARGET_DOMAIN, _anomalous_sequence(rng, _TGT_ROUTINE_PLAIN, _TGT_PANIC, None), 1, train)

    # Target test split: 30 normal, 14 shard faults, 6 panic faults, shuffled.
    test: list[LogSequence] = []
    counter = 0
    test_specs = [(0, "normal")] * 30 + [(1, "shard")] * 14 + [(1, "panic")] * 6
    order = rng.permutation(len(test_specs))
    for i in order:
        label, kind = test_specs[i]
        if kind == "normal":
            msgs = _normal_sequence(rng, _TGT_ROUTINE_KEYED, _TGT_ROUTINE_PLAIN)
        elif kind == "shard":
            msgs = _anomalous_sequence(rng, _TGT_ROUTINE_PLAIN, _TGT_SHARD, None)
        else:
            msgs = _anomalous_sequence(rng, _TGT_ROUTINE_PLAIN, _TGT_PANIC, None)
        add("test", TARGET_DOMAIN, msgs, label, test)

    return Corpus(train), Corpus(test), make_mock_oracle_spec()


def make_accounting_corpus(seed: int = 11, n: int = 20) -> tuple[Corpus, OracleSpec]:
    """Small labeled two-domain corpus for oracle-call accounting tests."""
    rng = np.random.default_rng(seed)
    sequences = []
    for i in range(n):
        if i % 2 == 0:
            domain, keyed, plain, fault = SOURCE_DOMAIN, _SRC_ROUTINE_KEYED, _SRC_ROUTINE_PLAIN, _SRC_LEASE
        else:
            domain, keyed, plain, fault = TARGET_DOMAIN, _TGT_ROUTINE_KEYED, _TGT_ROUTINE_PLAIN, _TGT_SHARD
        if i % 5 == 0:
            msgs = _anomalous_sequence(rng, plain, fault, None, length=4)
            label = 1
        else:
            msgs = _normal_sequence(rng, keyed, plain, length=4)
            label = 0
        sequences.append(LogSequence(id=f"acct{i:03d}", domain=domain, messages=msgs, label=label))
    return Corpus(sequences), make_mock_oracle_spec()
