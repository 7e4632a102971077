"""Datasets, vocabulary, history construction, negative sampling and the synthetic task."""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from unitrec.model import TurnedHistory
from unitrec.objectives import CandidateInstance

PAD, BOS, EOS, SEP, UNK = 0, 1, 2, 3, 4
RESERVED = ("<pad>", "<bos>", "<eos>", "<sep>", "<unk>")

VOCAB_HEADER = "# unitrec-vocab v1"
DATASET_FORMAT = "unitrec-dataset"
DATASET_VERSION = 1


class DataFormatError(ValueError):
    pass


class SamplingError(ValueError):
    pass


@dataclass
class RawExample:
    history: list[str]
    candidates: list[str]
    positive_indices: list[int]
    id: str = ""

    def __post_init__(self):
        if not self.history:
            raise ValueError(f"example {self.id!r}: history has no turns")
        if not self.candidates:
            raise ValueError(f"example {self.id!r}: no candidates")
        if not self.positive_indices:
            raise ValueError(f"example {self.id!r}: no positive candidate")
        n = len(self.candidates)
        if any(not 0 <= i < n for i in self.positive_indices):
            raise ValueError(f"example {self.id!r}: positive index outside [0, {n})")


class Vocabulary:
    """Token <-> id map with fixed reserved ids 0..4."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join([VOCAB_HEADER, *self.itos]) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != VOCAB_HEADER:
            raise DataFormatError(f"{path}: missing vocabulary header {VOCAB_HEADER!r}")
        body = lines[1:]
        if tuple(body[: len(RESERVED)]) != RESERVED:
            raise DataFormatError(f"{path}: reserved tokens missing or out of order")
        return cls(body[len(RESERVED) :])


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.stoi.get(w, UNK) for w in text.lower().split()]


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.itos[i] for i in ids)


def build_history(turns: Sequence[Sequence[int]], max_len: int) -> TurnedHistory:
    """Concatenate SEP-prefixed turns, keeping the most recent ``max_len`` tokens.

    Whole oldest turns are dropped first; the oldest turn that survives may be
    head-truncated (its SEP kept, earliest words removed) to use the remaining
    budget.
    """
    if not turns:
        raise ValueError("history has no turns")
    for i, t in enumerate(turns):
        if len(t) == 0:
            raise ValueError(f"history turn {i} is empty")
    kept: list[list[int]] = []
    budget = max_len
    for turn in reversed(turns):
        need = len(turn) + 1
        if need <= budget:
            kept.append([SEP, *turn])
            budget -= need
            continue
        if budget >= 2:
            kept.append([SEP, *turn[len(turn) - (budget - 1) :]])
        break
    if not kept:
        raise ValueError(f"max_len={max_len} leaves no room for any history turn")
    kept.reverse()
    tokens = [t for turn in kept for t in turn]
    turn_ids = [i for i, turn in enumerate(kept) for _ in turn]
    return TurnedHistory(tokens, turn_ids)


def candidate_sequence(tokens: Sequence[int], max_len: int) -> tuple[int, ...]:
    """Decoder form BOS + tokens + EOS, truncated to ``max_len``."""
    return (BOS, *tokens[: max_len - 2], EOS)


@dataclass(frozen=True)
class EncodedExample:
    history: TurnedHistory
    candidates: tuple[tuple[int, ...], ...]
    positive_indices: tuple[int, ...]
    id: str = ""


def encode_example(ex: RawExample, vocab: Vocabulary, max_len: int) -> EncodedExample:
    turns = [tokenize(t, vocab) for t in ex.history]
    turns = [t for t in turns if t]
    if not turns:
        raise ValueError(f"example {ex.id!r}: every history turn is empty after tokenisation")
    return EncodedExample(
        history=build_history(turns, max_len),
        candidates=tuple(candidate_sequence(tokenize(c, vocab), max_len) for c in ex.candidates),
        positive_indices=tuple(ex.positive_indices),
        id=ex.id,
    )


def sample_negatives(example: EncodedExample, K: int, rng: np.random.Generator) -> list[CandidateInstance]:
    """One training instance per positive, with K negatives drawn without replacement."""
    positives = set(example.positive_indices)
    pool = [i for i in range(len(example.candidates)) if i not in positives]
    if K < 1 or len(pool) < K:
        raise SamplingError(
            f"example {example.id!r}: cannot draw K={K} negatives from {len(pool)} non-positive candidates"
        )
    out = []
    for pos in example.positive_indices:
        picks = rng.choice(len(pool), size=K, replace=False)
        out.append(
            CandidateInstance(
                history=example.history,
                positive=example.candidates[pos],
                negatives=tuple(example.candidates[pool[j]] for j in picks),
            )
        )
    return out


# ---------------------------------------------------------------- files


def write_dataset(path: str | Path, examples: Iterable[RawExample]) -> None:
    lines = [json.dumps({"format": DATASET_FORMAT, "version": DATASET_VERSION})]
    for ex in examples:
        lines.append(json.dumps(asdict(ex), ensure_ascii=False))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset(path: str | Path) -> list[RawExample]:
    """Load a JSON-lines dataset; the version header line is optional."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if "format" in rec:
                if rec["format"] != DATASET_FORMAT or rec.get("version") != DATASET_VERSION:
                    raise DataFormatError(f"{path}:{lineno}: unsupported dataset header {rec}")
                continue
            try:
                out.append(
                    RawExample(
                        history=list(rec["history"]),
                        candidates=list(rec["candidates"]),
                        positive_indices=[int(i) for i in rec["positive_indices"]],
                        id=str(rec.get("id", lineno)),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise DataFormatError(f"{path}:{lineno}: bad record ({exc})") from None
    return out


# ---------------------------------------------------------------- synthetic task


@dataclass(frozen=True)
class SyntheticSpec:
    """Topic-mixture recommendation task.

    Every topic owns a disjoint block of words; the rest of the vocabulary is
    shared filler. A user's turns mostly follow the user's topic, the positive
    candidate is drawn from that topic and every negative from another one.
    """

    n_topics: int = 8
    vocab_size: int = 512
    min_turns: int = 3
    max_turns: int = 8
    min_tokens: int = 5
    max_tokens: int = 12
    n_candidates: int = 20
    n_train: int = 2000
    n_test: int = 500
    topic_word_share: float = 0.25
    word_purity: float = 0.8
    turn_purity: float = 0.85
    seed: int = 0

    def __post_init__(self):
        if self.n_topics < 2:
            raise ValueError("n_topics must be >= 2")
        if self.n_candidates < 2:
            raise ValueError("n_candidates must be >= 2")
        if not (1 <= self.min_turns <= self.max_turns and 1 <= self.min_tokens <= self.max_tokens):
            raise ValueError("turn/token ranges must satisfy 1 <= min <= max")
        if self.topic_block < 2 or self.n_filler < 1:
            raise ValueError(
                f"vocab_size={self.vocab_size} too small for {self.n_topics} topics"
            )

    @property
    def topic_block(self) -> int:
        free = self.vocab_size - len(RESERVED)
        return int(free * self.topic_word_share) // self.n_topics

    @property
    def n_filler(self) -> int:
        return self.vocab_size - len(RESERVED) - self.topic_block * self.n_topics


def topic_word(topic: int, j: int) -> str:
    return f"t{topic}w{j}"


def filler_word(j: int) -> str:
    return f"f{j}"


def word_topic(word: str) -> int | None:
    """Topic owning ``word``, or None for filler / unknown words."""
    if word.startswith("t") and "w" in word:
        head = word[1:].split("w", 1)[0]
        if head.isdigit():
            return int(head)
    return None


def synthetic_vocabulary(spec: SyntheticSpec) -> Vocabulary:
    words = [topic_word(z, j) for z in range(spec.n_topics) for j in range(spec.topic_block)]
    words += [filler_word(j) for j in range(spec.n_filler)]
    return Vocabulary(words)


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    vocab: Vocabulary
    train: list[RawExample] = field(default_factory=list)
    test: list[RawExample] = field(default_factory=list)
    user_topics: dict[str, int] = field(default_factory=dict)


def _text(rng: np.random.Generator, spec: SyntheticSpec, topic: int) -> str:
    n = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
    words = []
    for _ in range(n):
        if rng.random() < spec.word_purity:
            words.append(topic_word(topic, int(rng.integers(spec.topic_block))))
        else:
            words.append(filler_word(int(rng.integers(spec.n_filler))))
    return " ".join(words)


def _other_topic(rng: np.random.Generator, n_topics: int, avoid: int) -> int:
    z = int(rng.integers(n_topics - 1))
    return z + 1 if z >= avoid else z


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    rng = np.random.default_rng(spec.seed)
    ds = SyntheticDataset(spec=spec, vocab=synthetic_vocabulary(spec))
    for split, count in (("train", spec.n_train), ("test", spec.n_test)):
        rows = []
        for i in range(count):
            ex_id = f"{split}-{i}"
            topic = int(rng.integers(spec.n_topics))
            n_turns = int(rng.integers(spec.min_turns, spec.max_turns + 1))
            history = []
            for _ in range(n_turns):
                z = topic if rng.random() < spec.turn_purity else _other_topic(rng, spec.n_topics, topic)
                history.append(_text(rng, spec, z))
            pos = int(rng.integers(spec.n_candidates))
            candidates = [
                _text(rng, spec, topic if j == pos else _other_topic(rng, spec.n_topics, topic))
                for j in range(spec.n_candidates)
            ]
            rows.append(RawExample(history, candidates, [pos], id=ex_id))
            ds.user_topics[ex_id] = topic
        setattr(ds, split, rows)
    return ds


def save_synthetic(ds: SyntheticDataset, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"train": out / "train.jsonl", "test": out / "test.jsonl", "vocab": out / "vocab.txt"}
    write_dataset(paths["train"], ds.train)
    write_dataset(paths["test"], ds.test)
    ds.vocab.save(paths["vocab"])
    return paths


def dataset_stats(examples: Sequence[RawExample]) -> dict[str, float]:
    """Average history turns/tokens and candidate count/tokens (whitespace tokens)."""
    if not examples:
        raise ValueError("no examples")
    n = len(examples)
    n_cands = sum(len(ex.candidates) for ex in examples)
    return {
        "avg_history_turns": sum(len(ex.history) for ex in examples) / n,
        "avg_history_tokens": sum(len(t.split()) for ex in examples for t in ex.history) / n,
        "avg_candidates": n_cands / n,
        "avg_candidate_tokens": sum(len(c.split()) for ex in examples for c in ex.candidates) / n_cands,
    }


def format_stats(stats_by_split: dict[str, dict[str, float]]) -> str:
    rows = [
        ("Avg. history turns", "avg_history_turns"),
        ("Avg. history tokens", "avg_history_tokens"),
        ("Avg. candidates", "avg_candidates"),
        ("Avg. candidate tokens", "avg_candidate_tokens"),
    ]
    splits = list(stats_by_split)
    lines = [f"{'Split':<22}" + "".join(f"{s:>10}" for s in splits)]
    for label, key in rows:
        lines.append(f"{label:<22}" + "".join(f"{stats_by_split[s][key]:>10.2f}" for s in splits))
    return "\n".join(lines)
