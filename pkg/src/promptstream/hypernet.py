"""Prompt-generating hypernetwork with a prior-anchored regularizer.

A two-layer network maps a trainable task embedding to a full prompt tensor:
``g(z) = W2 tanh(W1 z + b1) + b2``. While a task trains, the prompt entering
the model is always the live ``g(z)``, so the task loss backpropagates into
the generator weights and the embedding. Each step additionally penalizes
the squared distance between the generated prompt and one uniformly sampled
archived prompt, which keeps the generator close to what it produced for
earlier tasks. After training, any archived task on which the final prompt
scores at least as well as its stored prompt gets replaced by the final
prompt (consolidation), so replayed scores can only improve.
"""

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .container import read_container, write_container
from .model import SoftPrompt


@dataclass
class HypernetParams:
    """Generator weights; output dimension matches the configured prompt shape."""

    W1: np.ndarray  # (hidden, d)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (prompt_size, hidden)
    b2: np.ndarray  # (prompt_size,)

    def copy(self) -> "HypernetParams":
        return HypernetParams(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy())

    @classmethod
    def random(cls, config: ModelConfig, rng: np.random.Generator, hidden: int = 64):
        d = config.hidden_dim
        out = int(np.prod(config.prompt_shape()))
        bound1 = np.sqrt(6.0 / (d + hidden))
        bound2 = np.sqrt(6.0 / (hidden + out))
        return cls(
            W1=rng.uniform(-bound1, bound1, size=(hidden, d)),
            b1=np.zeros(hidden),
            W2=rng.uniform(-bound2, bound2, size=(out, hidden)),
            b2=np.zeros(out),
        )

    def validate(self, config: ModelConfig):
        hidden = self.b1.shape[0]
        out = int(np.prod(config.prompt_shape()))
        expected = {
            "W1": (hidden, config.hidden_dim),
            "b1": (hidden,),
            "W2": (out, hidden),
            "b2": (out,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"hypernet {name} shape {arr.shape} != expected {shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"hypernet {name} contains non-finite values")


def generate(params: HypernetParams, z, config: ModelConfig) -> SoftPrompt:
    """Prompt produced for task embedding z; pure function of (params, z)."""
    h = np.tanh(params.W1 @ z + params.b1)
    flat = params.W2 @ h + params.b2
    return SoftPrompt(flat.reshape(config.prompt_shape()), config.injection)


def generate_backward(params: HypernetParams, z, dprompt):
    """Chain a prompt-shaped gradient back to the generator and embedding.

    Returns (grads: HypernetParams, dz).
    """
    dout = np.asarray(dprompt, dtype=np.float64).reshape(-1)
    h = np.tanh(params.W1 @ z + params.b1)
    dW2 = np.outer(dout, h)
    db2 = dout
    dh = params.W2.T @ dout
    da = dh * (1.0 - h * h)
    grads = HypernetParams(W1=np.outer(da, z), b1=da, W2=dW2, b2=db2)
    return grads, params.W1.T @ da


def regularized_loss(base_loss: float, generated: SoftPrompt, prior: SoftPrompt | None,
                     task_index: int, beta: float):
    """Task loss plus the prior-anchor penalty.

    Returns (loss, dpenalty/dgenerated). For the first task, or when no prior
    was sampled, the penalty is absent and the gradient is zero. The sampled
    prior is treated as a constant.
    """
    if prior is None or task_index < 2:
        return float(base_loss), np.zeros_like(generated.values)
    if generated.values.shape != prior.values.shape:
        raise ValueError(
            f"prompt shapes differ: {generated.values.shape} vs {prior.values.shape}"
        )
    diff = generated.values - prior.values
    coeff = beta / (task_index - 1)
    return float(base_loss) + coeff * float((diff * diff).sum()), 2.0 * coeff * diff


def sample_prior(library, rng: np.random.Generator):
    """Uniformly sampled archived entry, or None when the library is empty."""
    if not len(library):
        return None
    return library.entries[int(rng.integers(0, len(library)))]


def consolidate(library, final_prompt: SoftPrompt, evaluator):
    """Replace every archived prompt the final prompt matches or beats.

    ``evaluator(task_id, prompt)`` must return the F1 of ``prompt`` on that
    task's test split. All evaluations run before any replacement, so an
    evaluator failure leaves the library untouched. Returns the replaced ids.
    """
    scores = [(e.task_id, evaluator(e.task_id, final_prompt), e.recorded_f1)
              for e in library.entries]
    replaced = []
    for task_id, new_f1, old_f1 in scores:
        if new_f1 >= old_f1:
            library.replace(task_id, final_prompt, new_f1)
            replaced.append(task_id)
    return replaced


def save_hypernet(params: HypernetParams, config: ModelConfig, path):
    write_container(
        path,
        kind="hypernet",
        config=config.to_dict(),
        tensors={"W1": params.W1, "b1": params.b1, "W2": params.W2, "b2": params.b2},
    )


def load_hypernet(path, config: ModelConfig) -> HypernetParams:
    kind, config_dict, _, tensors = read_container(path)
    if kind != "hypernet":
        raise ValueError(f"{path}: expected hypernet parameters, found kind {kind!r}")
    if config_dict != config.to_dict():
        raise ValueError(f"{path}: hypernet was written for a different model config")
    params = HypernetParams(tensors["W1"], tensors["b1"], tensors["W2"], tensors["b2"])
    params.validate(config)
    return params
