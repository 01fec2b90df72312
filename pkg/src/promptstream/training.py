"""SGD training loops for prompts, the hypernetwork path, and fine-tuning.

Full-shot training early-stops on validation F1 with a patience budget and
returns the best-validation state; few-shot training runs a fixed number of
steps with no early stopping. Plain SGD throughout (no momentum), which
keeps every analytic gradient directly checkable against finite
differences.
"""

from dataclasses import dataclass, field

import numpy as np

from .hypernet import generate, generate_backward, regularized_loss, sample_prior
from .metrics import f1_score
from .model import (
    Verbalizer,
    finetune_loss_and_grad,
    predict_probs,
    prompt_loss_and_grad,
)

IMPROVE_EPS = 1e-9


@dataclass(frozen=True)
class TrainSettings:
    """Hyperparameters; defaults follow the reference setup this mirrors."""

    prompt_lr: float = 7e-3           # per-task prompt training
    baseline_prompt_lr: float = 5e-3  # evolving single-prompt baselines (incl. MTL)
    finetune_lr: float = 5e-5
    hypernet_lr: float = 1e-4
    embedding_lr: float = 7e-3        # trainable task embedding in hypernet mode
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 4
    fewshot_steps: int = 500
    fewshot_k: tuple = (4, 8, 16)
    reg_beta: float = 0.01
    fs_on_validation: bool = True     # evaluate few-shot on validation (else test)
    hypernet_hidden: int = 64

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["fewshot_k"] = list(self.fewshot_k)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSettings":
        d = dict(d)
        if "fewshot_k" in d:
            d["fewshot_k"] = tuple(d["fewshot_k"])
        return cls(**d)


@dataclass
class FitInfo:
    epochs: int = 0
    best_val_f1: float = float("nan")
    train_losses: list = field(default_factory=list)


def predict_label(backbone, prompt, claim_ids, comment_ids, verbalizer=None) -> int:
    probs = predict_probs(backbone, prompt, claim_ids, comment_ids, verbalizer)
    return int(np.argmax(probs))


def evaluate_prompt(backbone, prompt, examples_tok, verbalizer=None) -> float:
    """Macro F1 (percent) of the prompt on tokenized (claim, comments, label) examples."""
    preds = [predict_label(backbone, prompt, c, m, verbalizer) for c, m, _ in examples_tok]
    return f1_score(preds, [label for _, _, label in examples_tok])


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_prompt_full(backbone, prompt, train_tok, val_tok, verbalizer, settings,
                      rng, lr=None):
    """Early-stopped full-shot prompt training; returns (best prompt, FitInfo)."""
    lr = settings.prompt_lr if lr is None else lr
    prompt = prompt.copy()
    best = prompt.copy()
    best_f1 = -np.inf
    bad_epochs = 0
    info = FitInfo()
    for epoch in range(settings.max_epochs):
        epoch_loss = 0.0
        n_batches = 0
        for idx in _batches(len(train_tok), settings.batch_size, rng):
            batch = [train_tok[i] for i in idx]
            loss, grad = prompt_loss_and_grad(backbone, prompt, batch, verbalizer)
            prompt.values -= lr * grad
            epoch_loss += loss
            n_batches += 1
        info.train_losses.append(epoch_loss / n_batches)
        info.epochs = epoch + 1
        val_f1 = evaluate_prompt(backbone, prompt, val_tok, verbalizer)
        if val_f1 > best_f1 + IMPROVE_EPS:
            best, best_f1, bad_epochs = prompt.copy(), val_f1, 0
        else:
            bad_epochs += 1
            if bad_epochs >= settings.patience:
                break
    info.best_val_f1 = best_f1
    return best, info


def train_prompt_steps(backbone, prompt, train_tok, verbalizer, settings, rng,
                       steps=None, lr=None):
    """Fixed-step prompt training (few-shot stage); no early stopping."""
    lr = settings.prompt_lr if lr is None else lr
    steps = settings.fewshot_steps if steps is None else steps
    prompt = prompt.copy()
    pending = []
    for _ in range(steps):
        if not pending:
            pending = list(_batches(len(train_tok), settings.batch_size, rng))
        idx = pending.pop(0)
        batch = [train_tok[i] for i in idx]
        _, grad = prompt_loss_and_grad(backbone, prompt, batch, verbalizer)
        prompt.values -= lr * grad
    return prompt


def train_hypernet_full(backbone, hnet, z_init, library, task_index, train_tok,
                        val_tok, verbalizer, settings, rng):
    """Joint training of generator weights and task embedding.

    The prompt entering the model is the live generated prompt, so the task
    loss reaches the generator through the prompt gradient; the prior-anchor
    penalty samples one archived prompt per step. Returns
    (best hnet, best z, best generated prompt, FitInfo).
    """
    config = backbone.config
    hnet = hnet.copy()
    z = np.array(z_init, dtype=np.float64)
    best = (hnet.copy(), z.copy())
    best_f1 = -np.inf
    bad_epochs = 0
    info = FitInfo()
    for epoch in range(settings.max_epochs):
        epoch_loss = 0.0
        n_batches = 0
        for idx in _batches(len(train_tok), settings.batch_size, rng):
            batch = [train_tok[i] for i in idx]
            prompt = generate(hnet, z, config)
            base_loss, dprompt = prompt_loss_and_grad(backbone, prompt, batch, verbalizer)
            prior = sample_prior(library, rng)
            loss, dpenalty = regularized_loss(
                base_loss, prompt, prior.prompt if prior else None,
                task_index, settings.reg_beta,
            )
            hgrads, dz = generate_backward(hnet, z, dprompt + dpenalty)
            hnet.W1 -= settings.hypernet_lr * hgrads.W1
            hnet.b1 -= settings.hypernet_lr * hgrads.b1
            hnet.W2 -= settings.hypernet_lr * hgrads.W2
            hnet.b2 -= settings.hypernet_lr * hgrads.b2
            z -= settings.embedding_lr * dz
            epoch_loss += loss
            n_batches += 1
        info.train_losses.append(epoch_loss / n_batches)
        info.epochs = epoch + 1
        val_f1 = evaluate_prompt(backbone, generate(hnet, z, config), val_tok, verbalizer)
        if val_f1 > best_f1 + IMPROVE_EPS:
            best, best_f1, bad_epochs = (hnet.copy(), z.copy()), val_f1, 0
        else:
            bad_epochs += 1
            if bad_epochs >= settings.patience:
                break
    info.best_val_f1 = best_f1
    hnet, z = best
    return hnet, z, generate(hnet, z, config), info


def evaluate_finetune(state, examples_tok, verbalizer=None) -> float:
    """Macro F1 of a (possibly thawed) backbone evaluated promptless."""
    preds = [
        int(np.argmax(predict_probs(state, None, c, m, verbalizer)))
        for c, m, _ in examples_tok
    ]
    return f1_score(preds, [label for _, _, label in examples_tok])


def _sgd_params(state, grads, lr):
    for name, g in grads.items():
        state.params[name] -= lr * g


def train_finetune_full(state, train_tok, val_tok, verbalizer, settings, rng):
    """Early-stopped full-model training; mutates ``state`` to the best epoch."""
    best = {k: v.copy() for k, v in state.params.items()}
    best_f1 = -np.inf
    bad_epochs = 0
    info = FitInfo()
    for epoch in range(settings.max_epochs):
        epoch_loss = 0.0
        n_batches = 0
        for idx in _batches(len(train_tok), settings.batch_size, rng):
            batch = [train_tok[i] for i in idx]
            loss, grads = finetune_loss_and_grad(state, batch, verbalizer)
            _sgd_params(state, grads, settings.finetune_lr)
            epoch_loss += loss
            n_batches += 1
        info.train_losses.append(epoch_loss / n_batches)
        info.epochs = epoch + 1
        val_f1 = evaluate_finetune(state, val_tok, verbalizer)
        if val_f1 > best_f1 + IMPROVE_EPS:
            best, best_f1, bad_epochs = {k: v.copy() for k, v in state.params.items()}, val_f1, 0
        else:
            bad_epochs += 1
            if bad_epochs >= settings.patience:
                break
    state.params = best
    state._rebuild_layer_cache()
    info.best_val_f1 = best_f1
    return info


def train_finetune_steps(state, train_tok, verbalizer, settings, rng, steps=None):
    """Fixed-step full-model training on a copy (few-shot measurement)."""
    steps = settings.fewshot_steps if steps is None else steps
    pending = []
    for _ in range(steps):
        if not pending:
            pending = list(_batches(len(train_tok), settings.batch_size, rng))
        idx = pending.pop(0)
        batch = [train_tok[i] for i in idx]
        _, grads = finetune_loss_and_grad(state, batch, verbalizer)
        _sgd_params(state, grads, settings.finetune_lr)
    return state


def default_verbalizer() -> Verbalizer:
    return Verbalizer.default()
