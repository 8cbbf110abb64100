# ccanlab/data.py
"""
Synthetic tasks, the vocabulary and the JSON-lines dataset format.

A dataset file holds one record per line, {"src": [...], "tgt": [...]},
both arrays of token strings, UTF-8. A vocab file holds one token per line;
line i is id i and the first four lines are the reserved tokens.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ccanlab.common import SPECIAL_TOKENS, ConfigError, DataError
from ccanlab.config import TASKS
from ccanlab.tensor import make_rng

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


# ==================== VOCAB ====================

class Vocab:
    """Bijective token <-> id map; ids 0..3 always belong to PAD, BOS, EOS, MASK."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise DataError(f"vocab must start with the reserved tokens {', '.join(SPECIAL_TOKENS)}")
        index: Dict[str, int] = {}
        for i, token in enumerate(tokens):
            if not token or any(ch.isspace() for ch in token):
                raise DataError(f"vocab entry {i} is empty or contains whitespace: {token!r}")
            if token in index:
                raise DataError(f"duplicate vocab entry {token!r} at ids {index[token]} and {i}")
            index[token] = i
        self.tokens = tokens
        self.index = index

    @classmethod
    def from_content(cls, content: Iterable[str]) -> "Vocab":
        return cls(list(SPECIAL_TOKENS) + list(content))

    @classmethod
    def synthetic(cls, content_size: int) -> "Vocab":
        return cls.from_content(content_token(i) for i in range(content_size))

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def encode(self, tokens: Sequence[str]) -> List[int]:
        try:
            return [self.index[t] for t in tokens]
        except KeyError as e:
            raise DataError(f"token {e.args[0]!r} is not in the vocabulary")

    def decode(self, ids: Sequence[int]) -> List[str]:
        out = []
        for i in ids:
            if not 0 <= int(i) < len(self.tokens):
                raise DataError(f"token id {i} outside vocabulary of size {len(self.tokens)}")
            out.append(self.tokens[int(i)])
        return out

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for token in self.tokens:
                f.write(token + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocab":
        try:
            with open(path, "r", encoding="utf-8") as f:
                tokens = [line.rstrip("\n") for line in f]
        except FileNotFoundError:
            raise DataError(f"vocab file not found: {path}")
        return cls(tokens)


def content_token(index: int) -> str:
    return f"t{index}"


# ==================== SYNTHETIC TASKS ====================

@dataclass
class DatasetRecord:
    src: List[str]
    tgt: List[str]

    def to_dict(self) -> Dict[str, List[str]]:
        return {"src": list(self.src), "tgt": list(self.tgt)}


def task_target(task: str, content_ids: Sequence[int], content_size: int) -> List[int]:
    """Apply one task rule to content indices 0..C-1."""
    length = len(content_ids)
    if task == "copy":
        return list(content_ids)
    if task == "local-fusion":
        # last position pairs with the first
        return [(content_ids[i] + content_ids[(i + 1) % length]) % content_size for i in range(length)]
    if task == "global-sort":
        return sorted(content_ids)
    raise ConfigError(f"unknown task {task!r}; valid tasks: {', '.join(TASKS)}")


def gen_synthetic(task: str, count: int, len_range: Tuple[int, int] = (8, 16), vocab_size: int = 64,
                  seed: int = 1) -> List[DatasetRecord]:
    """
    Generate `count` records of a synthetic task over `vocab_size` content tokens.
    Source lengths are uniform over the inclusive `len_range`.
    """
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; valid tasks: {', '.join(TASKS)}")
    lo, hi = len_range
    if lo < 1 or hi < lo:
        raise ConfigError(f"length range must satisfy 1 <= min <= max, got {lo}..{hi}")
    if vocab_size < 2:
        raise ConfigError(f"need at least 2 content tokens, got {vocab_size}")
    if count < 0:
        raise ConfigError(f"count must be non-negative, got {count}")

    rng = make_rng(seed)
    records = []
    for _ in range(count):
        length = int(rng.integers(lo, hi + 1))
        src = rng.integers(0, vocab_size, size=length).tolist()
        tgt = task_target(task, src, vocab_size)
        records.append(DatasetRecord(src=[content_token(i) for i in src], tgt=[content_token(i) for i in tgt]))
    return records


def gen_splits(task: str, sizes: Dict[str, int], out_dir: str, len_range: Tuple[int, int] = (8, 16),
               vocab_size: int = 64, seed: int = 1) -> Dict[str, str]:
    """Write <split>.jsonl for each split (seeded seed + split index) plus vocab.txt; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for i, split in enumerate(SPLITS):
        if split not in sizes:
            continue
        records = gen_synthetic(task, sizes[split], len_range, vocab_size, seed + i)
        paths[split] = str(out / f"{split}.jsonl")
        write_jsonl(records, paths[split])
        logger.info(f"Wrote {len(records)} {task} records to {paths[split]}")
    paths["vocab"] = str(out / "vocab.txt")
    Vocab.synthetic(vocab_size).save(paths["vocab"])
    return paths


# ==================== DATASET IO ====================

def write_jsonl(records: Iterable[DatasetRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")


def _token_list(value, field: str, path: str, line_no: int) -> List[str]:
    if not isinstance(value, list) or not value or not all(isinstance(t, str) for t in value):
        raise DataError(f"{path}:{line_no}: '{field}' must be a non-empty array of token strings")
    return value


def read_jsonl(path: str, require_tgt: bool = True) -> List[DatasetRecord]:
    """Read a dataset; blank lines are skipped and any malformed line is reported by number."""
    try:
        f = open(path, "r", encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"dataset file not found: {path}")
    records = []
    with f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{line_no}: malformed JSON ({e.msg})")
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{line_no}: record must be a JSON object")
            if "src" not in obj:
                raise DataError(f"{path}:{line_no}: record is missing 'src'")
            if require_tgt and "tgt" not in obj:
                raise DataError(f"{path}:{line_no}: record is missing 'tgt'")
            src = _token_list(obj["src"], "src", path, line_no)
            tgt = _token_list(obj["tgt"], "tgt", path, line_no) if "tgt" in obj else []
            records.append(DatasetRecord(src=src, tgt=tgt))
    if not records:
        logger.warning(f"Dataset {path} is empty")
    return records


def read_token_lines(path: str, field: str = "src") -> List[List[str]]:
    """
    Token sequences from either a dataset (.jsonl, taking `field`) or a plain
    text file with one whitespace-separated sentence per line.
    """
    if str(path).endswith(".jsonl"):
        records = read_jsonl(path, require_tgt=field == "tgt")
        return [record.tgt if field == "tgt" else record.src for record in records]
    try:
        with open(path, "r", encoding="utf-8") as f:
            return [line.split() for line in f.read().splitlines()]
    except FileNotFoundError:
        raise DataError(f"file not found: {path}")


def write_token_lines(sentences: Iterable[Sequence[str]], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for tokens in sentences:
            f.write(" ".join(tokens) + "\n")


def encode_records(records: Sequence[DatasetRecord], vocab: Vocab,
                   max_len: Optional[int] = None) -> Tuple[List[List[int]], List[List[int]]]:
    """Map records to id lists, rejecting sequences longer than `max_len`."""
    sources, targets = [], []
    for i, record in enumerate(records):
        for name, tokens in (("src", record.src), ("tgt", record.tgt)):
            if max_len is not None and len(tokens) > max_len:
                raise DataError(f"record {i + 1}: {name} length {len(tokens)} exceeds max_len {max_len}")
        sources.append(vocab.encode(record.src))
        targets.append(vocab.encode(record.tgt))
    return sources, targets


def batches(num_items: int, batch_size: int, rng: Optional[np.random.Generator] = None) -> List[np.ndarray]:
    """Index batches over range(num_items), shuffled when an rng is given."""
    order = rng.permutation(num_items) if rng is not None else np.arange(num_items)
    return [order[i:i + batch_size] for i in range(0, num_items, batch_size)]
