"""Corpus ingestion: claim+comments records, cleaning, splits, few-shot draws.

Tokenization is deliberately primitive (whitespace split + vocabulary
lookup, unknown words to [UNK]); the backbone vocabulary is closed and
carries its own surface forms.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .config import (
    LABEL_NAMES,
    N_RESERVED,
    NON_RUMOR,
    RESERVED_TOKENS,
    RUMOR,
    UNK_ID,
    URL_TOKEN,
    USER_TOKEN,
)
from .rng import substream


class DataError(ValueError):
    """Malformed records or impossible split/sampling requests."""


@dataclass
class RumorExample:
    claim: str
    comments: list
    label: int  # 0 = non-rumor, 1 = rumor
    domain: str

    def __post_init__(self):
        if not self.claim.strip():
            raise DataError("claim must be non-empty")
        if self.label not in (NON_RUMOR, RUMOR):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")


@dataclass
class DomainTask:
    """One domain's split data plus its name."""

    name: str
    train: list
    validation: list
    test: list


# ---------------------------------------------------------------------------
# Vocabulary and tokenization


@dataclass
class Vocabulary:
    """Closed token inventory: reserved ids first, then content words."""

    words: list
    index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if tuple(self.words[:N_RESERVED]) != RESERVED_TOKENS:
            raise DataError("vocabulary must start with the reserved tokens")
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise DataError("vocabulary contains duplicate surface forms")

    def __len__(self):
        return len(self.words)

    def encode(self, text: str) -> list:
        return [self.index.get(tok, UNK_ID) for tok in text.split()]

    def decode(self, ids) -> str:
        return " ".join(self.words[i] for i in ids)

    @classmethod
    def synthetic(cls, vocab_size: int) -> "Vocabulary":
        """Reserved tokens plus numbered content words (w008, w009, ...)."""
        words = list(RESERVED_TOKENS) + [f"w{i:03d}" for i in range(N_RESERVED, vocab_size)]
        return cls(words)

    @classmethod
    def build(cls, texts, vocab_size: int) -> "Vocabulary":
        """Reserved tokens plus the most frequent corpus words, ties by surface."""
        counts = {}
        for text in texts:
            for tok in text.split():
                counts[tok] = counts.get(tok, 0) + 1
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        content = [w for w in ranked if w not in RESERVED_TOKENS][: vocab_size - N_RESERVED]
        return cls(list(RESERVED_TOKENS) + content)


def tokenize_example(example: RumorExample, vocab: Vocabulary):
    """(claim_ids, comment_ids, label); comments joined into one token run."""
    claim_ids = vocab.encode(example.claim)
    comment_ids = []
    for comment in example.comments:
        comment_ids.extend(vocab.encode(comment))
    return claim_ids, comment_ids, example.label


# ---------------------------------------------------------------------------
# Ingestion and cleaning


def load_jsonl(path) -> list:
    """Read claim/comments/label/domain records, one JSON object per line."""
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            missing = {"claim", "comments", "label", "domain"} - rec.keys()
            if missing:
                raise DataError(f"{path}:{lineno}: missing field(s) {sorted(missing)}")
            if rec["label"] not in LABEL_NAMES:
                raise DataError(
                    f"{path}:{lineno}: label must be one of {LABEL_NAMES}, got {rec['label']!r}"
                )
            examples.append(
                RumorExample(
                    claim=rec["claim"],
                    comments=list(rec["comments"]),
                    label=LABEL_NAMES.index(rec["label"]),
                    domain=rec["domain"],
                )
            )
    return examples


def _clean_text(text: str) -> str:
    out = []
    for tok in text.split():
        if tok.startswith("http://") or tok.startswith("https://"):
            out.append(URL_TOKEN)
        elif tok.startswith("@"):
            out.append(USER_TOKEN)
        else:
            out.append(tok)
    return " ".join(out)


def preprocess(example: RumorExample) -> RumorExample:
    """Replace URL-shaped and @-mention tokens with their placeholder surfaces."""
    return RumorExample(
        claim=_clean_text(example.claim),
        comments=[_clean_text(c) for c in example.comments],
        label=example.label,
        domain=example.domain,
    )


# ---------------------------------------------------------------------------
# Splits and few-shot sampling


def split(domain_examples, seed: int) -> DomainTask:
    """Seeded shuffle then a 30%/35%/35% cut into train/validation/test.

    Every split must contain both classes; otherwise the domain is rejected.
    """
    examples = list(domain_examples)
    if len(examples) < 10:
        raise DataError(f"need at least 10 examples per domain, got {len(examples)}")
    domain = examples[0].domain
    rng = substream(seed, "split", domain)
    order = rng.permutation(len(examples))
    shuffled = [examples[i] for i in order]
    a, b = int(0.30 * len(shuffled)), int(0.65 * len(shuffled))
    parts = {"train": shuffled[:a], "validation": shuffled[a:b], "test": shuffled[b:]}
    for name, part in parts.items():
        present = {ex.label for ex in part}
        if present != {NON_RUMOR, RUMOR}:
            raise DataError(
                f"domain {domain!r}: {name} split is missing a class "
                f"(labels present: {sorted(present)})"
            )
    return DomainTask(domain, parts["train"], parts["validation"], parts["test"])


def few_shot(task: DomainTask, k: int, seed: int) -> list:
    """Class-balanced draw of k examples per class from the train split."""
    rng = substream(seed, "few-shot", task.name, k)
    chosen = []
    for cls in (NON_RUMOR, RUMOR):
        pool = [ex for ex in task.train if ex.label == cls]
        if len(pool) < k:
            raise DataError(
                f"domain {task.name!r}: class {LABEL_NAMES[cls]} has only "
                f"{len(pool)} train examples, need {k}"
            )
        idx = rng.choice(len(pool), size=k, replace=False)
        chosen.extend(pool[i] for i in idx)
    return chosen
