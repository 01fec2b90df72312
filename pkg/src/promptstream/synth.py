"""Synthetic domain-stream generator.

Produces a stream of binary claim-classification tasks over a closed
vocabulary, plus an unlabeled corpus for backbone pretraining. Every claim
contains exactly one of two designated cue words; the label is a
deterministic function of which cue appears. Three regimes:

* ``consistent`` — each domain owns a private cue pair and filler block;
  every domain is cleanly solvable and domains do not contradict each other.
* ``inverted`` — all domains share one global cue pair but consecutive
  domains flip the cue-to-label mapping, and all domains reuse the same
  per-example cue pattern sequence. Any fixed decision rule over cue counts
  therefore averages exactly 50% accuracy over an adjacent domain pair:
  manufactured interference for forgetting experiments.
* ``rotated`` — domains cycle through a small number of families; a family
  shares its cue pair, label rule, and most of its filler vocabulary, so a
  prompt trained on one family member transfers to the next and task
  embeddings within a family are close: manufactured forward transfer.

All sampling is a pure function of the config.
"""

from dataclasses import dataclass, field

import numpy as np

from .config import N_RESERVED, RUMOR
from .data import DataError, DomainTask, RumorExample, Vocabulary, split
from .rng import substream

RULES = ("consistent", "inverted", "rotated")


@dataclass(frozen=True)
class SynthStreamConfig:
    n_tasks: int = 5
    rule: str = "consistent"
    examples_per_domain: int = 200
    claim_len: int = 8
    n_comments: int = 2
    comment_len: int = 4
    exclusive_words: int = 40  # per domain (per family in rotated mode)
    accent_words: int = 8  # per-domain extra block in rotated mode
    shared_words: int = 60
    shared_frac: float = 0.3
    n_families: int = 2
    corpus_sentences: int = 2500
    corpus_len: int = 12
    vocab_size: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.n_tasks < 2:
            raise DataError(f"need at least 2 tasks, got {self.n_tasks}")
        if self.rule not in RULES:
            raise DataError(f"rule must be one of {RULES}, got {self.rule!r}")
        if self.claim_len < 2:
            raise DataError("claims need room for a cue plus at least one filler")
        if not 0.0 <= self.shared_frac <= 1.0:
            raise DataError(f"shared_frac must be in [0, 1], got {self.shared_frac}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthStreamConfig":
        return cls(**d)


@dataclass
class DomainSpec:
    """Where one domain's words live and how its labels are decided."""

    name: str
    cue_rumor: int  # cue word implying label "rumor"
    cue_nonrumor: int
    filler_ids: list
    family: int


@dataclass
class TaskStream:
    config: SynthStreamConfig
    vocab: Vocabulary
    specs: list  # DomainSpec per domain, stream order
    domains: list  # DomainTask per domain, stream order
    corpus: list  # token-id sentences for backbone pretraining
    shared_ids: list = field(default_factory=list)

    def domain_named(self, name: str) -> DomainTask:
        for task in self.domains:
            if task.name == name:
                return task
        raise KeyError(f"no domain named {name!r}")

    def manifest(self) -> dict:
        """JSON-able description of the generated stream."""
        return {
            "config": self.config.to_dict(),
            "vocab_size": len(self.vocab),
            "shared_ids": list(self.shared_ids),
            "domains": [
                {
                    "name": s.name,
                    "family": s.family,
                    "cue_rumor": s.cue_rumor,
                    "cue_nonrumor": s.cue_nonrumor,
                    "filler_ids": [int(i) for i in s.filler_ids],
                    "examples": self.config.examples_per_domain,
                }
                for s in self.specs
            ],
            "corpus": {
                "sentences": len(self.corpus),
                "sentence_len": self.config.corpus_len,
            },
        }


def _allocate(config: SynthStreamConfig):
    """Carve the content-id range into shared pool, cue pairs, filler blocks."""
    cursor = N_RESERVED

    def take(n):
        nonlocal cursor
        block = list(range(cursor, cursor + n))
        cursor += n
        if cursor > config.vocab_size:
            raise DataError(
                f"vocabulary exhausted: need {cursor} ids but vocab_size is {config.vocab_size}"
            )
        return block

    shared = take(config.shared_words)
    specs = []
    if config.rule == "inverted":
        cue_a, cue_b = take(2)
        for d in range(config.n_tasks):
            fillers = take(config.exclusive_words)
            rumor_cue, nonrumor_cue = (cue_a, cue_b) if d % 2 == 0 else (cue_b, cue_a)
            specs.append(DomainSpec(_name(d), rumor_cue, nonrumor_cue, fillers, family=d % 2))
    elif config.rule == "rotated":
        family_cues = [take(2) for _ in range(config.n_families)]
        family_blocks = [take(config.exclusive_words) for _ in range(config.n_families)]
        for d in range(config.n_tasks):
            f = d % config.n_families
            accent = take(config.accent_words)
            specs.append(
                DomainSpec(_name(d), family_cues[f][0], family_cues[f][1],
                           family_blocks[f] + accent, family=f)
            )
    else:
        for d in range(config.n_tasks):
            block = take(config.exclusive_words)
            specs.append(DomainSpec(_name(d), block[0], block[1], block[2:], family=d))
    return shared, specs


def _name(d: int) -> str:
    return f"event{d + 1:02d}"


def _sample_fillers(rng, n, shared, fillers, shared_frac):
    picks = []
    for _ in range(n):
        pool = shared if rng.random() < shared_frac else fillers
        picks.append(int(pool[rng.integers(0, len(pool))]))
    return picks


def generate_stream(config: SynthStreamConfig) -> TaskStream:
    """Deterministically generate the stream, its splits, and the corpus."""
    shared, specs = _allocate(config)
    vocab = Vocabulary.synthetic(config.vocab_size)
    n = config.examples_per_domain

    # In inverted mode every domain reuses one cue-pattern sequence so that
    # adjacent domains are exact mirror images of each other.
    base = np.array([e % 2 for e in range(n)])
    shared_pattern = base[substream(config.seed, "pattern").permutation(n)]

    domains = []
    for d, spec in enumerate(specs):
        rng = substream(config.seed, "examples", d)
        if config.rule == "inverted":
            rumor_flags = shared_pattern
        else:
            rumor_flags = base[substream(config.seed, "labels", d).permutation(n)]
        examples = []
        for e in range(n):
            label = int(rumor_flags[e]) if config.rule != "inverted" else (
                int(shared_pattern[e]) if d % 2 == 0 else 1 - int(shared_pattern[e])
            )
            # The displayed cue follows the pattern; the label follows the rule.
            if config.rule == "inverted":
                cue = specs[0].cue_rumor if shared_pattern[e] else specs[0].cue_nonrumor
            else:
                cue = spec.cue_rumor if label == RUMOR else spec.cue_nonrumor
            claim_ids = _sample_fillers(rng, config.claim_len - 1, shared,
                                        spec.filler_ids, config.shared_frac)
            claim_ids.insert(int(rng.integers(0, config.claim_len)), cue)
            comments = []
            for _ in range(config.n_comments):
                ids = _sample_fillers(rng, config.comment_len, shared,
                                      spec.filler_ids, config.shared_frac)
                comments.append(vocab.decode(ids))
            examples.append(
                RumorExample(
                    claim=vocab.decode(claim_ids),
                    comments=comments,
                    label=label,
                    domain=spec.name,
                )
            )
        domains.append(split(examples, seed=config.seed))

    # Pretraining corpus: domain-colored sentences with a bigram skeleton
    # (each word has a fixed partner that tends to follow it), so masked
    # prediction has real structure for the backbone to learn.
    corpus_rng = substream(config.seed, "corpus")
    partner_rng = substream(config.seed, "partners")
    pools = []
    partners = []
    for spec in specs:
        pool = spec.filler_ids + [spec.cue_rumor, spec.cue_nonrumor] + shared
        perm = partner_rng.permutation(len(pool))
        pools.append(pool)
        partners.append({pool[i]: pool[perm[i]] for i in range(len(pool))})
    corpus = []
    for s in range(config.corpus_sentences):
        d = s % config.n_tasks
        pool, partner = pools[d], partners[d]
        sentence = [int(pool[corpus_rng.integers(0, len(pool))])]
        for _ in range(config.corpus_len - 1):
            if corpus_rng.random() < 0.5:
                sentence.append(int(partner[sentence[-1]]))
            else:
                sentence.append(int(pool[corpus_rng.integers(0, len(pool))]))
        corpus.append(sentence)

    return TaskStream(config, vocab, specs, domains, corpus, shared_ids=shared)
