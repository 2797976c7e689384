"""
Tool-aware dataset partitioning
===============================

Phase 1 shuffles the corpus and assigns every record greedily to the subset
minimising (number of its tools the subset has not seen yet, subset size),
lowest subset index on ties. Phase 2 splits each subset: records sorted by tool
count descending, the first floor(r*N) train, the rest test, ordered by how
many tools they use that the training split never saw. Ties in both sorts
keep corpus order.

Records are JSON lines; the raw line is kept so unknown fields survive
verbatim in the output files.
"""
import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import AlignmentError, ConfigError, EmptyTrainingSplit, MissingToolsField, PartitionError

logger = logging.getLogger(__name__)

OVERLAP_BASIS = 'union'


@dataclass(frozen=True)
class PartitionRecord:
    id: str
    tools: frozenset
    payload: bytes = b''
    position: int = 0   # line index in the corpus file


@dataclass(frozen=True)
class PartitionConfig:
    subsets: int
    ratio: float
    seed: int = 0
    deterministic_order: bool = False

    def __post_init__(self):
        if isinstance(self.subsets, bool) or not isinstance(self.subsets, int) or self.subsets < 1:
            raise ConfigError(f"number of subsets must be >= 1, got {self.subsets}")
        if not 0 < self.ratio <= 1:
            raise ConfigError(f"training ratio must lie in (0, 1], got {self.ratio}")


@dataclass(frozen=True)
class OverlapMatrix:
    """counts[m][n] = |train tools of m  ∩  test tools of n|; percent uses the union as basis."""

    counts: tuple
    percent: tuple
    basis: str = OVERLAP_BASIS

    @property
    def size(self):
        return len(self.counts)


# ============================================
# INPUT
# ============================================

def _lookup(document, field_path):
    """Follow a dotted path ("$.a.b", "a.b" or "a[0].b") through nested JSON."""
    path = field_path[2:] if field_path.startswith('$.') else field_path
    node = document
    for part in path.replace('[', '.').replace(']', '').split('.'):
        if part == '':
            continue
        if isinstance(node, dict) and part in node:
            node = node[part]
        elif isinstance(node, list) and part.isdigit() and int(part) < len(node):
            node = node[int(part)]
        else:
            raise KeyError(field_path)
    return node


def _tool_names(value):
    if isinstance(value, str):
        return [value]
    names = []
    for item in value:
        if isinstance(item, str):
            names.append(item)
        elif isinstance(item, dict) and isinstance(item.get('name'), str):
            names.append(item['name'])
        else:
            raise TypeError(f"cannot read a tool name from {item!r}")
    return names


def parse_record(line, index, tools_field='tools', id_field='id'):
    """Build a record from one JSON line; the id defaults to the line number."""
    try:
        document = json.loads(line)
    except json.JSONDecodeError as exc:
        raise PartitionError(f"line {index + 1} is not valid JSON: {exc}") from exc
    record_id = str(document.get(id_field, index)) if isinstance(document, dict) else str(index)
    try:
        tools = _tool_names(_lookup(document, tools_field))
    except (KeyError, TypeError):
        raise MissingToolsField(record_id, tools_field) from None
    payload = line if isinstance(line, bytes) else line.encode('utf-8')
    return PartitionRecord(id=record_id, tools=frozenset(tools), payload=payload.rstrip(b'\r\n'), position=index)


def load_records(path, tools_field='tools', id_field='id'):
    records = []
    seen = set()
    with open(path, 'rb') as fh:
        for index, line in enumerate(fh):
            if not line.strip():
                continue
            record = parse_record(line, index, tools_field, id_field)
            if record.id in seen:
                raise PartitionError(f"duplicate record id {record.id!r}")
            seen.add(record.id)
            records.append(record)
    logger.info(f"Loaded {len(records)} records from {path}")
    return records


# ============================================
# ALGORITHM
# ============================================

def assign_subsets(records, cfg):
    """Phase 1: greedy tool-aware assignment into ``cfg.subsets`` lists."""
    order = list(records)
    if not cfg.deterministic_order and order:
        permutation = np.random.default_rng(cfg.seed).permutation(len(order))
        order = [order[i] for i in permutation]

    subsets = [[] for _ in range(cfg.subsets)]
    seen_tools = [set() for _ in range(cfg.subsets)]
    for record in order:
        target = min(
            range(cfg.subsets),
            key=lambda m: (len(record.tools - seen_tools[m]), len(subsets[m]), m),
        )
        subsets[target].append(record)
        seen_tools[target] |= record.tools
    return subsets


def split_train_test(subset, cfg):
    """Phase 2: density-sorted train prefix, novelty-sorted test remainder."""
    if not subset:
        raise EmptyTrainingSplit(0, cfg.ratio)
    n_train = math.floor(cfg.ratio * len(subset))
    if n_train == 0:
        raise EmptyTrainingSplit(len(subset), cfg.ratio)

    # ties break by corpus position, not by the shuffled order within the subset
    dense_first = sorted(subset, key=lambda record: (-len(record.tools), record.position))
    train = dense_first[:n_train]
    train_tools = tool_union(train)
    test = sorted(dense_first[n_train:], key=lambda record: (len(record.tools - train_tools), record.position))
    return train, test


def tool_union(records):
    return frozenset().union(*(record.tools for record in records))


def overlap_matrix(trains, tests):
    if len(trains) != len(tests):
        raise AlignmentError(f"{len(trains)} training subsets but {len(tests)} test subsets")
    train_tools = [tool_union(train) for train in trains]
    test_tools = [tool_union(test) for test in tests]
    counts, percent = [], []
    for row in train_tools:
        counts.append(tuple(len(row & col) for col in test_tools))
        percent.append(tuple(
            100.0 * len(row & col) / len(row | col) if row | col else 0.0
            for col in test_tools
        ))
    return OverlapMatrix(counts=tuple(counts), percent=tuple(percent))


def partition(records, cfg):
    """Both phases: list of (train, test) per subset plus the overlap matrix."""
    subsets = assign_subsets(records, cfg)
    splits = [split_train_test(subset, cfg) if subset else ([], []) for subset in subsets]
    matrix = overlap_matrix([s[0] for s in splits], [s[1] for s in splits])
    logger.info(f"Partitioned {len(records)} records into {cfg.subsets} subsets: "
                f"{', '.join(f'{len(tr)}/{len(te)}' for tr, te in splits)} (train/test)")
    return splits, matrix


# ============================================
# OUTPUT
# ============================================

def write_jsonl(path, records):
    with open(path, 'wb') as fh:
        for record in records:
            fh.write(record.payload + b'\n')
