"""Sequential task-stream engine: three-stage protocol, learners, bookkeeping.

Each task passes through zero-shot (evaluate the initialization), few-shot
(fixed-step training on k examples per class, measured on a throwaway
copy), and full-shot (early-stopped training) stages. Three learner
families share the protocol:

* ``replay``  — per-task prompts archived in a library; the full-shot stage
  starts from a fresh random prompt (optionally generated by the
  hypernetwork), and earlier tasks are always evaluated with their archived
  prompts, so nothing is ever forgotten. Zero-/few-shot stages start from a
  library-derived initialization (random / previous / similar / mean).
* ``prompt``  — one evolving prompt trained across all tasks in sequence
  (shallow or deep per the model config); old tasks are evaluated with the
  current prompt, so interference shows up directly.
* ``finetune`` — the whole backbone (a thawed private copy) evolves across
  tasks.

The shared frozen backbone's digest is checked after every stage. Scores
land in a ScoreMatrix: row 0 is the untrained baseline, the super-diagonal
comes from each task's zero-shot stage, and row k is filled for tasks
1..k after task k's full-shot stage.
"""

from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .data import DomainTask, few_shot, preprocess, tokenize_example
from .hypernet import HypernetParams, consolidate, generate
from .library import (
    PromptLibrary,
    init_from_mean,
    init_from_most_similar,
    init_from_previous,
)
from .metrics import ScoreMatrix
from .model import SoftPrompt, Verbalizer, task_encode
from .rng import substream
from .container import snap_f32
from .training import (
    TrainSettings,
    evaluate_finetune,
    evaluate_prompt,
    train_finetune_full,
    train_finetune_steps,
    train_hypernet_full,
    train_prompt_full,
    train_prompt_steps,
)

LEARNERS = ("finetune", "prompt", "replay")
INIT_STRATEGIES = ("random", "previous", "similar", "mean")


@dataclass(frozen=True)
class MethodConfig:
    """What to train and how old tasks are revisited."""

    learner: str
    head: str = "verbalizer"
    init: str = "random"
    hypernet: bool = False
    rehearsal_per_domain: int = 0
    mtl: bool = False
    name: str = ""

    def __post_init__(self):
        if self.learner not in LEARNERS:
            raise ValueError(f"learner must be one of {LEARNERS}, got {self.learner!r}")
        if self.init not in INIT_STRATEGIES:
            raise ValueError(f"init must be one of {INIT_STRATEGIES}, got {self.init!r}")
        if self.hypernet and self.learner != "replay":
            raise ValueError("the hypernetwork requires the replay learner")
        if self.init != "random" and self.learner != "replay":
            raise ValueError("library-based init strategies require the replay learner")
        if self.mtl and self.learner != "prompt":
            raise ValueError("multi-task mode trains a single prompt (learner='prompt')")
        if self.mtl and self.rehearsal_per_domain:
            raise ValueError("multi-task mode already pools all data; rehearsal is meaningless")
        if self.rehearsal_per_domain < 0:
            raise ValueError("rehearsal_per_domain must be >= 0")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        parts = ["mtl" if self.mtl else "seq", self.learner]
        if self.learner == "replay":
            parts.append(self.init)
            if self.hypernet:
                parts.append("hypernet")
        if self.rehearsal_per_domain:
            parts.append(f"rehearsal{self.rehearsal_per_domain}")
        return "-".join(parts)


@dataclass
class StageRecord:
    task_id: int
    domain: str
    zero_shot_f1: float
    few_shot_f1: dict
    full_shot_f1: float
    init_strategy: str
    init_source_task: int | None
    epochs: int
    best_val_f1: float

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "domain": self.domain,
            "zero_shot_f1": self.zero_shot_f1,
            "few_shot_f1": {str(k): v for k, v in self.few_shot_f1.items()},
            "full_shot_f1": self.full_shot_f1,
            "init_strategy": self.init_strategy,
            "init_source_task": self.init_source_task,
            "epochs": self.epochs,
            "best_val_f1": self.best_val_f1,
        }


@dataclass
class RunResult:
    method: MethodConfig
    seed: int
    order: list
    matrix: ScoreMatrix
    records: list
    library: PromptLibrary | None
    digest_checks: list  # (stage label, bool)

    @property
    def digests_ok(self) -> bool:
        return all(ok for _, ok in self.digest_checks)


@dataclass
class _TokTask:
    task_id: int
    domain: DomainTask
    train: list
    validation: list
    test: list


def _tokenize_split(examples, vocab):
    return [tokenize_example(preprocess(ex), vocab) for ex in examples]


def _tokenize_tasks(tasks, vocab):
    out = []
    for i, task in enumerate(tasks, start=1):
        out.append(
            _TokTask(
                task_id=i,
                domain=task,
                train=_tokenize_split(task.train, vocab),
                validation=_tokenize_split(task.validation, vocab),
                test=_tokenize_split(task.test, vocab),
            )
        )
    return out


def sample_rehearsal(train_tok, per_domain: int, rng) -> list:
    """Seeded uniform sample (without replacement) from one domain's train split."""
    if per_domain == 0:
        return []
    if per_domain >= len(train_tok):
        return list(train_tok)
    idx = rng.choice(len(train_tok), size=per_domain, replace=False)
    return [train_tok[i] for i in idx]


def _row0_prompt(config: ModelConfig, seed: int) -> SoftPrompt:
    """The untrained-baseline prompt; also the fallback for empty-library inits."""
    return SoftPrompt.random(config, substream(seed, "row0-prompt"))


def _library_init(method, library, z_query, config, seed):
    """Zero-/few-shot initialization for the replay learner.

    Returns (prompt, source_task_id). The empty-library fallback regenerates
    the row-0 baseline prompt, so a first task's zero-shot score equals its
    baseline-row score exactly.
    """
    fallback_rng = substream(seed, "row0-prompt")
    if method.init == "random" or not len(library):
        return SoftPrompt.random(config, fallback_rng), None
    if method.init == "previous":
        return init_from_previous(library, fallback_rng), library.entries[-1].task_id
    if method.init == "similar":
        return init_from_most_similar(library, z_query, fallback_rng)
    return init_from_mean(library, fallback_rng), None


def run_stream(backbone, tasks, method: MethodConfig, settings: TrainSettings,
               seed: int, vocab, verbalizer: Verbalizer | None = None) -> RunResult:
    """Run one ordered task stream under one method; deterministic per seed."""
    if len(tasks) < 2:
        raise ValueError("a stream needs at least 2 tasks")
    config = backbone.config
    if method.head != config.head:
        raise ValueError(
            f"method head {method.head!r} does not match model config head {config.head!r}"
        )
    verbalizer = verbalizer or Verbalizer.default()
    verbalizer.validate(config)
    tok = _tokenize_tasks(tasks, vocab)
    n = len(tok)
    matrix = ScoreMatrix(n)
    digest_checks = []
    frozen_digest = backbone.digest()

    def check_digest(label):
        digest_checks.append((label, backbone.digest() == frozen_digest))

    if method.mtl:
        return _run_mtl(backbone, tok, method, settings, seed, verbalizer,
                        matrix, digest_checks, frozen_digest)

    # Untrained baseline row.
    row0 = _row0_prompt(config, seed)
    if method.learner == "finetune":
        state = backbone.thawed_copy()
        for t in tok:
            matrix.set(0, t.task_id, evaluate_finetune(state, t.test, verbalizer))
    else:
        for t in tok:
            matrix.set(0, t.task_id, evaluate_prompt(backbone, row0, t.test, verbalizer))
        if method.learner == "prompt":
            current_prompt = row0.copy()
    check_digest("baseline-row")

    library = PromptLibrary(config) if method.learner == "replay" else None
    hnet = (
        HypernetParams.random(config, substream(seed, "hypernet-init"), settings.hypernet_hidden)
        if method.hypernet
        else None
    )
    buffer = []
    records = []

    for t in tok:
        k = t.task_id
        # ---- zero-shot stage ----
        z_query = None
        if method.learner == "replay":
            z_query = task_encode(backbone, [(c, m) for c, m, _ in t.train])
            init_prompt, init_source = _library_init(method, library, z_query, config, seed)
            zero_f1 = evaluate_prompt(backbone, init_prompt, t.test, verbalizer)
        elif method.learner == "prompt":
            init_prompt, init_source = current_prompt, None
            zero_f1 = evaluate_prompt(backbone, current_prompt, t.test, verbalizer)
        else:
            init_prompt, init_source = None, None
            zero_f1 = evaluate_finetune(state, t.test, verbalizer)
        matrix.set(k - 1, k, zero_f1)
        check_digest(f"task{k}-zero-shot")

        # ---- few-shot stage (throwaway copies; nothing carries over) ----
        few = {}
        for kk in settings.fewshot_k:
            fs_tok = _tokenize_split(few_shot(t.domain, kk, seed), vocab)
            fs_rng = substream(seed, "fewshot", k, kk)
            eval_split = t.validation if settings.fs_on_validation else t.test
            if method.learner == "finetune":
                fs_state = state.thawed_copy()
                train_finetune_steps(fs_state, fs_tok, verbalizer, settings, fs_rng)
                few[kk] = evaluate_finetune(fs_state, eval_split, verbalizer)
            else:
                lr = settings.prompt_lr if method.learner == "replay" else settings.baseline_prompt_lr
                trained = train_prompt_steps(backbone, init_prompt, fs_tok, verbalizer,
                                             settings, fs_rng, lr=lr)
                few[kk] = evaluate_prompt(backbone, trained, eval_split, verbalizer)
        check_digest(f"task{k}-few-shot")

        # ---- full-shot stage ----
        train_set = t.train + buffer
        full_rng = substream(seed, "fullshot", k)
        if method.learner == "replay":
            if method.hypernet:
                hnet, z_trained, final_prompt, info = train_hypernet_full(
                    backbone, hnet, z_query, library, k, train_set, t.validation,
                    verbalizer, settings, full_rng,
                )
                final_prompt = SoftPrompt(snap_f32(final_prompt.values), final_prompt.injection)
            else:
                fresh = SoftPrompt.random(config, substream(seed, "fullshot-init", k))
                final_prompt, info = train_prompt_full(
                    backbone, fresh, train_set, t.validation, verbalizer, settings, full_rng,
                )
                final_prompt = SoftPrompt(snap_f32(final_prompt.values), final_prompt.injection)
            test_f1 = evaluate_prompt(backbone, final_prompt, t.test, verbalizer)
            if method.hypernet:
                by_id = {tt.task_id: tt for tt in tok}
                consolidate(
                    library, final_prompt,
                    lambda tid, p: evaluate_prompt(backbone, p, by_id[tid].test, verbalizer),
                )
            library.store(k, final_prompt, snap_f32(z_query), test_f1)
            for i in range(1, k):
                replay_f1 = evaluate_prompt(backbone, library.get(i).prompt,
                                            tok[i - 1].test, verbalizer)
                matrix.set(k, i, replay_f1)
            matrix.set(k, k, test_f1)
        elif method.learner == "prompt":
            current_prompt, info = train_prompt_full(
                backbone, current_prompt, train_set, t.validation, verbalizer,
                settings, full_rng, lr=settings.baseline_prompt_lr,
            )
            for i in range(1, k + 1):
                matrix.set(k, i, evaluate_prompt(backbone, current_prompt,
                                                 tok[i - 1].test, verbalizer))
            test_f1 = matrix.get(k, k)
        else:
            info = train_finetune_full(state, train_set, t.validation, verbalizer,
                                       settings, full_rng)
            for i in range(1, k + 1):
                matrix.set(k, i, evaluate_finetune(state, tok[i - 1].test, verbalizer))
            test_f1 = matrix.get(k, k)
        check_digest(f"task{k}-full-shot")

        if method.rehearsal_per_domain:
            buffer.extend(
                sample_rehearsal(t.train, method.rehearsal_per_domain,
                                 substream(seed, "rehearsal", t.domain.name))
            )

        records.append(
            StageRecord(
                task_id=k,
                domain=t.domain.name,
                zero_shot_f1=zero_f1,
                few_shot_f1=few,
                full_shot_f1=test_f1,
                init_strategy=method.init if method.learner == "replay" else "n/a",
                init_source_task=init_source,
                epochs=info.epochs,
                best_val_f1=info.best_val_f1,
            )
        )

    return RunResult(
        method=method,
        seed=seed,
        order=[t.domain.name for t in tok],
        matrix=matrix,
        records=records,
        library=library,
        digest_checks=digest_checks,
    )


def _run_mtl(backbone, tok, method, settings, seed, verbalizer, matrix,
             digest_checks, frozen_digest):
    """Pooled-data upper bound: one prompt trained on all tasks at once.

    Only the baseline row and the final row are defined; forward/backward
    transfer are meaningless here and reported as absent.
    """
    config = backbone.config
    row0 = _row0_prompt(config, seed)
    for t in tok:
        matrix.set(0, t.task_id, evaluate_prompt(backbone, row0, t.test, verbalizer))
    pooled_train = [ex for t in tok for ex in t.train]
    pooled_val = [ex for t in tok for ex in t.validation]
    prompt, info = train_prompt_full(
        backbone, row0, pooled_train, pooled_val, verbalizer, settings,
        substream(seed, "mtl"), lr=settings.baseline_prompt_lr,
    )
    records = []
    n = len(tok)
    for t in tok:
        f1 = evaluate_prompt(backbone, prompt, t.test, verbalizer)
        matrix.set(n, t.task_id, f1)
        records.append(
            StageRecord(
                task_id=t.task_id,
                domain=t.domain.name,
                zero_shot_f1=matrix.get(0, t.task_id),
                few_shot_f1={},
                full_shot_f1=f1,
                init_strategy="n/a",
                init_source_task=None,
                epochs=info.epochs,
                best_val_f1=info.best_val_f1,
            )
        )
    digest_checks.append(("mtl", backbone.digest() == frozen_digest))
    return RunResult(
        method=method,
        seed=seed,
        order=[t.domain.name for t in tok],
        matrix=matrix,
        records=records,
        library=None,
        digest_checks=digest_checks,
    )
