"""Frozen masked-LM backbone with soft-prompt injection and analytic gradients.

The backbone is a small pre-norm transformer encoder trained from scratch on
a synthetic corpus (see ``pretrain``) and then frozen: its arrays are made
read-only and a content digest guards against mutation. Classification
reads either a verbalizer head (masked-word probabilities pooled into label
probabilities) or a linear head on the first position's hidden state.

Only prompts receive gradients; a thawed copy of the backbone exists solely
for the full fine-tuning baseline. All math is float64 so the hand-derived
gradients can be validated against central finite differences.

Input layout for one example::

    [prompt tokens] [MASK] claim tokens [SEP] comment tokens

Shallow injection prepends ``prompt_len`` trainable vectors to the input
embeddings; deep injection instead attaches one ``prompt_len``-long prefix
to every layer's attention key/value stream.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .config import (
    DEEP,
    HEAD_CLS,
    HEAD_VERBALIZER,
    MASK_ID,
    NONRUMOR_WORD_ID,
    RUMOR_WORD_ID,
    SEP_ID,
    SHALLOW,
    ModelConfig,
)
from .container import read_container, snap_f32, write_container
from . import kernels
from .kernels import LAYER_KEYS, layer_norm, layer_norm_backward


class NumericsError(RuntimeError):
    """Non-finite values encountered during a forward or loss computation."""


# ---------------------------------------------------------------------------
# Prompts and verbalizer


@dataclass
class SoftPrompt:
    """Trainable prompt tensor: (prompt_len, d) shallow or (L, prompt_len, d) deep."""

    values: np.ndarray
    injection: str

    def copy(self) -> "SoftPrompt":
        return SoftPrompt(self.values.copy(), self.injection)

    def validate(self, config: ModelConfig):
        expected = (
            (config.prompt_len, config.hidden_dim)
            if self.injection == SHALLOW
            else (config.n_layers, config.prompt_len, config.hidden_dim)
        )
        if self.injection != config.injection:
            raise ValueError(
                f"prompt injection {self.injection!r} does not match config {config.injection!r}"
            )
        if self.values.shape != expected:
            raise ValueError(f"prompt shape {self.values.shape} != expected {expected}")
        if not np.isfinite(self.values).all():
            raise ValueError("prompt contains non-finite values")

    @classmethod
    def random(cls, config: ModelConfig, rng: np.random.Generator) -> "SoftPrompt":
        # Scale-stable random init: uniform(-0.5, 0.5) / sqrt(d).
        values = rng.uniform(-0.5, 0.5, size=config.prompt_shape()) / np.sqrt(config.hidden_dim)
        return cls(values, config.injection)


@dataclass(frozen=True)
class Verbalizer:
    """Maps each label to a disjoint, non-empty set of vocabulary ids."""

    non_rumor_words: tuple
    rumor_words: tuple

    def __post_init__(self):
        if not self.non_rumor_words or not self.rumor_words:
            raise ValueError("verbalizer label word sets must be non-empty")
        if set(self.non_rumor_words) & set(self.rumor_words):
            raise ValueError("verbalizer label word sets must be disjoint")

    def validate(self, config: ModelConfig):
        for wid in self.non_rumor_words + self.rumor_words:
            if not 0 <= wid < config.vocab_size:
                raise ValueError(f"verbalizer word id {wid} outside vocab of {config.vocab_size}")

    @property
    def word_sets(self) -> tuple:
        """Word-id sets indexed by label (0 = non-rumor, 1 = rumor)."""
        return (self.non_rumor_words, self.rumor_words)

    @classmethod
    def default(cls) -> "Verbalizer":
        return cls((NONRUMOR_WORD_ID,), (RUMOR_WORD_ID,))


# ---------------------------------------------------------------------------
# Backbone


def _param_shapes(config: ModelConfig) -> dict:
    d, ff = config.hidden_dim, config.ffn_dim
    shapes = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_seq_len, d),
        "lnf_g": (d,),
        "lnf_b": (d,),
        "mlm_bias": (config.vocab_size,),
        "cls_W": (d, 2),
        "cls_b": (2,),
    }
    layer = {
        "ln1_g": (d,), "ln1_b": (d,),
        "Wq": (d, d), "bq": (d,), "Wk": (d, d), "bk": (d,),
        "Wv": (d, d), "bv": (d,), "Wo": (d, d), "bo": (d,),
        "ln2_g": (d,), "ln2_b": (d,),
        "Wf1": (d, ff), "bf1": (ff,), "Wf2": (ff, d), "bf2": (d,),
    }
    for i in range(config.n_layers):
        for k, shape in layer.items():
            shapes[f"layer{i}.{k}"] = shape
    return shapes


def parameter_counts(config: ModelConfig) -> dict:
    """Backbone parameter count per named tensor (computed from shapes only)."""
    return {name: int(np.prod(shape)) for name, shape in _param_shapes(config).items()}


def init_backbone_params(config: ModelConfig, rng: np.random.Generator) -> dict:
    """Random init: Xavier-uniform matrices, residual projections downscaled."""
    d = config.hidden_dim
    resid_scale = 1.0 / np.sqrt(2.0 * config.n_layers)

    def xavier(shape, scale=1.0):
        fan_in, fan_out = shape[0], shape[1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape) * scale

    params = {}
    for name, shape in _param_shapes(config).items():
        key = name.split(".")[-1]
        if key in ("tok_emb", "pos_emb"):
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(d), size=shape)
        elif key in ("ln1_g", "ln2_g", "lnf_g"):
            params[name] = np.ones(shape)
        elif key in ("Wo", "Wf2"):
            params[name] = xavier(shape, resid_scale)
        elif len(shape) == 2:
            params[name] = xavier(shape)
        else:
            params[name] = np.zeros(shape)
    return params


@dataclass
class Backbone:
    """A parameter set plus its config; freeze() makes it immutable."""

    config: ModelConfig
    params: dict
    _layer_params: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._rebuild_layer_cache()

    def _rebuild_layer_cache(self):
        self._layer_params = [
            tuple(self.params[f"layer{i}.{k}"] for k in LAYER_KEYS)
            for i in range(self.config.n_layers)
        ]

    def layer_params(self, i: int) -> tuple:
        return self._layer_params[i]

    def freeze(self) -> "Backbone":
        for arr in self.params.values():
            arr.flags.writeable = False
        return self

    def thawed_copy(self) -> "Backbone":
        return Backbone(self.config, {k: v.copy() for k, v in self.params.items()})

    def digest(self) -> str:
        """sha256 over name-sorted tensors at float32 precision (the stored precision)."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            arr = self.params[name]
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).astype("<f4").tobytes())
        return h.hexdigest()

    @classmethod
    def create(cls, config: ModelConfig, rng: np.random.Generator) -> "Backbone":
        return cls(config, init_backbone_params(config, rng))


def save_backbone(backbone: Backbone, path):
    write_container(
        path,
        kind="backbone",
        config=backbone.config.to_dict(),
        tensors=backbone.params,
        meta={"digest": backbone.digest()},
    )


def load_backbone(path) -> Backbone:
    kind, config_dict, meta, tensors = read_container(path)
    if kind != "backbone":
        raise ValueError(f"{path}: expected a backbone checkpoint, found kind {kind!r}")
    backbone = Backbone(ModelConfig.from_dict(config_dict), tensors)
    if backbone.digest() != meta.get("digest"):
        raise ValueError(f"{path}: checkpoint digest mismatch (corrupt or edited file)")
    return backbone.freeze()


# ---------------------------------------------------------------------------
# Input assembly


@dataclass
class AssembledInput:
    """Embedded input sequence plus the bookkeeping backward needs."""

    embeddings: np.ndarray  # (S, d), position embeddings included
    mask_index: int
    body_ids: list  # token ids of everything after the prompt rows
    n_prompt: int  # number of prompt rows baked into embeddings (shallow only)


def truncate_body(claim_ids, comment_ids, budget: int):
    """Fit [MASK] + claim + [SEP] + comments into ``budget`` tokens.

    Comments are dropped from the tail first; the claim is cut only when it
    cannot fit even with no comments.
    """
    claim_ids = list(claim_ids)
    comment_ids = list(comment_ids)
    overflow = 2 + len(claim_ids) + len(comment_ids) - budget
    if overflow > 0:
        keep = max(0, len(comment_ids) - overflow)
        comment_ids = comment_ids[:keep]
    if 2 + len(claim_ids) + len(comment_ids) > budget:
        claim_ids = claim_ids[: budget - 2]
    return claim_ids, comment_ids


def assemble_input(backbone: Backbone, prompt, claim_ids, comment_ids) -> AssembledInput:
    """Embed one example, optionally with shallow prompt rows prepended.

    With a deep prompt (or no prompt) the sequence holds only
    [MASK] claim [SEP] comments; deep prefixes are attached later, inside
    ``forward``. Returns the index of the [MASK] position.
    """
    config = backbone.config
    if len(claim_ids) == 0:
        raise ValueError("claim must be non-empty")
    if prompt is not None:
        prompt.validate(config)

    budget = config.body_budget if prompt is not None else config.max_seq_len
    claim_ids, comment_ids = truncate_body(claim_ids, comment_ids, budget)
    body = [MASK_ID] + claim_ids + [SEP_ID] + comment_ids

    tok_emb = backbone.params["tok_emb"]
    pos_emb = backbone.params["pos_emb"]
    if prompt is not None and prompt.injection == SHALLOW:
        rows = np.concatenate([prompt.values, tok_emb[body]], axis=0)
        n_prompt = config.prompt_len
    else:
        rows = tok_emb[body].copy()
        n_prompt = 0
    S = rows.shape[0]
    embeddings = rows + pos_emb[:S]
    return AssembledInput(embeddings, mask_index=n_prompt, body_ids=body, n_prompt=n_prompt)


# ---------------------------------------------------------------------------
# Encoder forward/backward


def _encode(backbone: Backbone, H0, prefixes, want_cache: bool):
    config = backbone.config
    H = H0
    caches = [] if want_cache else None
    for i in range(config.n_layers):
        prefix = None if prefixes is None else prefixes[i]
        H, cache = kernels.layer_forward(H, backbone.layer_params(i), prefix, config.n_heads)
        if not np.isfinite(H).all():
            raise NumericsError(f"non-finite activation after layer {i}")
        if want_cache:
            caches.append(cache)
    Hf, xhatf, rstdf = layer_norm(H, backbone.params["lnf_g"], backbone.params["lnf_b"])
    return Hf, (caches, xhatf, rstdf)


def _encode_backward(backbone: Backbone, enc_cache, dHf,
                     need_param_grads=False, need_prefix_grads=False):
    caches, xhatf, rstdf = enc_cache
    config = backbone.config
    param_grads = {} if need_param_grads else None

    dH, dgf, dbf = layer_norm_backward(dHf, xhatf, rstdf, backbone.params["lnf_g"])
    if need_param_grads:
        param_grads["lnf_g"] = dgf
        param_grads["lnf_b"] = dbf

    dprefixes = [None] * config.n_layers if need_prefix_grads else None
    for i in reversed(range(config.n_layers)):
        dH, dprefix, pgrads = kernels.layer_backward(
            dH, caches[i], backbone.layer_params(i), config.n_heads,
            need_param_grads=need_param_grads, need_prefix_grad=need_prefix_grads,
        )
        if need_prefix_grads:
            dprefixes[i] = dprefix
        if need_param_grads:
            for key, g in zip(LAYER_KEYS, pgrads):
                param_grads[f"layer{i}.{key}"] = g
    return dH, dprefixes, param_grads


def encode_tokens(backbone: Backbone, token_ids, want_cache: bool = False):
    """Promptless encode of a raw token-id sequence; returns (Hf, backward ctx)."""
    tok_emb = backbone.params["tok_emb"]
    pos_emb = backbone.params["pos_emb"]
    H0 = tok_emb[list(token_ids)] + pos_emb[: len(token_ids)]
    Hf, enc_cache = _encode(backbone, H0, None, want_cache)
    return Hf, enc_cache


# ---------------------------------------------------------------------------
# Heads


@dataclass
class ForwardOut:
    mask_logits: np.ndarray  # (vocab,)
    first_hidden: np.ndarray  # (d,)


def forward(backbone: Backbone, assembled: AssembledInput, prompt=None,
            want_cache: bool = False):
    """Run the encoder; returns masked-position vocab logits and the first
    position's hidden state (plus an opaque backward context when asked)."""
    prefixes = None
    if prompt is not None and prompt.injection == DEEP:
        prompt.validate(backbone.config)
        prefixes = prompt.values
    Hf, enc_cache = _encode(backbone, assembled.embeddings, prefixes, want_cache)
    logits = Hf[assembled.mask_index] @ backbone.params["tok_emb"].T + backbone.params["mlm_bias"]
    out = ForwardOut(mask_logits=logits, first_hidden=Hf[0])
    if want_cache:
        return out, (Hf, enc_cache)
    return out


def softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def verbalize(mask_logits, verbalizer: Verbalizer) -> np.ndarray:
    """Label probabilities from masked-word logits.

    Softmax over the full vocabulary, pool the probability mass of each
    label's word set, renormalize across the two labels.
    """
    if not np.isfinite(mask_logits).all():
        raise NumericsError("non-finite logits passed to verbalizer")
    p = softmax(mask_logits)
    mass = np.array([p[list(ws)].sum() for ws in verbalizer.word_sets])
    return mass / mass.sum()


def classify_cls(backbone: Backbone, first_hidden) -> np.ndarray:
    """Label probabilities from the first position via the linear head."""
    return softmax(first_hidden @ backbone.params["cls_W"] + backbone.params["cls_b"])


def predict_probs(backbone: Backbone, prompt, claim_ids, comment_ids,
                  verbalizer: Verbalizer | None = None) -> np.ndarray:
    """Label probabilities for one example under the configured head."""
    assembled = assemble_input(backbone, prompt, claim_ids, comment_ids)
    out = forward(backbone, assembled, prompt)
    if backbone.config.head == HEAD_VERBALIZER:
        return verbalize(out.mask_logits, verbalizer or Verbalizer.default())
    return classify_cls(backbone, out.first_hidden)


# ---------------------------------------------------------------------------
# Loss and gradients


def _head_loss_and_dHf(backbone, assembled, Hf, label, verbalizer):
    """Per-example loss and its gradient w.r.t. the final hidden states.

    Returns (loss, dHf, head_grads) where head_grads carries the tied
    embedding / head parameter gradients needed by the fine-tuning path.
    """
    config = backbone.config
    tok_emb = backbone.params["tok_emb"]
    dHf = np.zeros_like(Hf)
    head_grads = {}

    if config.head == HEAD_VERBALIZER:
        logits = Hf[assembled.mask_index] @ tok_emb.T + backbone.params["mlm_bias"]
        p = softmax(logits)
        mass = np.array([p[list(ws)].sum() for ws in verbalizer.word_sets])
        total = mass.sum()
        loss = -np.log(mass[label] / total)
        # d loss / d p_v = -1[v in V_label]/mass_label + 1[v in any V]/total,
        # and sum_v c_v p_v = 0, so d loss / d logits = p * c.
        c = np.zeros_like(p)
        for ws in verbalizer.word_sets:
            c[list(ws)] += 1.0 / total
        c[list(verbalizer.word_sets[label])] -= 1.0 / mass[label]
        dlogits = p * c
        dHf[assembled.mask_index] = dlogits @ tok_emb
        head_grads["mlm_bias"] = dlogits
        head_grads["tok_emb:head"] = (dlogits, Hf[assembled.mask_index])
    else:
        z = Hf[0] @ backbone.params["cls_W"] + backbone.params["cls_b"]
        p = softmax(z)
        loss = -np.log(p[label])
        dz = p.copy()
        dz[label] -= 1.0
        dHf[0] = dz @ backbone.params["cls_W"].T
        head_grads["cls_W"] = np.outer(Hf[0], dz)
        head_grads["cls_b"] = dz
    if not np.isfinite(loss):
        raise NumericsError("non-finite classification loss")
    return loss, dHf, head_grads


def prompt_loss_and_grad(backbone: Backbone, prompt: SoftPrompt, batch,
                         verbalizer: Verbalizer | None = None):
    """Mean NLL over a batch and its gradient w.r.t. the prompt tensor.

    ``batch`` is a list of (claim_ids, comment_ids, label). The returned
    gradient has exactly the prompt's shape; when a hypernetwork generates
    the prompt, this gradient is the upstream input of its chain rule.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    verbalizer = verbalizer or Verbalizer.default()
    config = backbone.config
    loss_sum = 0.0
    grad = np.zeros_like(prompt.values)
    deep = prompt.injection == DEEP
    for claim_ids, comment_ids, label in batch:
        if label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {label!r}")
        assembled = assemble_input(backbone, prompt, claim_ids, comment_ids)
        _, (Hf, enc_cache) = forward(backbone, assembled, prompt, want_cache=True)
        loss, dHf, _ = _head_loss_and_dHf(backbone, assembled, Hf, label, verbalizer)
        loss_sum += loss
        dH0, dprefixes, _ = _encode_backward(
            backbone, enc_cache, dHf, need_prefix_grads=deep,
        )
        if deep:
            for i in range(config.n_layers):
                grad[i] += dprefixes[i]
        else:
            grad += dH0[: config.prompt_len]
    n = len(batch)
    return loss_sum / n, grad / n


def finetune_loss_and_grad(state: Backbone, batch, verbalizer: Verbalizer | None = None):
    """Mean NLL and gradients for every backbone parameter (thawed baseline)."""
    if not batch:
        raise ValueError("batch must be non-empty")
    verbalizer = verbalizer or Verbalizer.default()
    loss_sum = 0.0
    grads = {name: np.zeros_like(arr) for name, arr in state.params.items()}
    for claim_ids, comment_ids, label in batch:
        assembled = assemble_input(state, None, claim_ids, comment_ids)
        _, (Hf, enc_cache) = forward(state, assembled, None, want_cache=True)
        loss, dHf, head_grads = _head_loss_and_dHf(state, assembled, Hf, label, verbalizer)
        loss_sum += loss
        dH0, _, param_grads = _encode_backward(state, enc_cache, dHf, need_param_grads=True)
        for name, g in param_grads.items():
            grads[name] += g
        if "tok_emb:head" in head_grads:
            dlogits, h = head_grads["tok_emb:head"]
            grads["tok_emb"] += np.outer(dlogits, h)
            grads["mlm_bias"] += head_grads["mlm_bias"]
        else:
            grads["cls_W"] += head_grads["cls_W"]
            grads["cls_b"] += head_grads["cls_b"]
        # Input-side embedding gradients (tied table gets both contributions).
        np.add.at(grads["tok_emb"], assembled.body_ids, dH0)
        grads["pos_emb"][: dH0.shape[0]] += dH0
    n = len(batch)
    return loss_sum / n, {name: g / n for name, g in grads.items()}


# ---------------------------------------------------------------------------
# Task encoding


def task_encode(backbone: Backbone, token_batches) -> np.ndarray:
    """Task embedding: mean over examples of the mean-pooled promptless encoding.

    ``token_batches`` is a list of (claim_ids, comment_ids) pairs; labels are
    not consulted. Encoded as ``claim [SEP] comments`` with no mask token and
    no prompt, so the embedding depends only on the frozen backbone.
    """
    items = list(token_batches)
    if not items:
        raise ValueError("task_encode requires at least one example")
    acc = np.zeros(backbone.config.hidden_dim)
    for claim_ids, comment_ids in items:
        claim_ids, comment_ids = truncate_body(claim_ids, comment_ids,
                                               backbone.config.max_seq_len)
        ids = list(claim_ids) + [SEP_ID] + list(comment_ids)
        Hf, _ = encode_tokens(backbone, ids)
        acc += Hf.mean(axis=0)
    return acc / len(items)


# ---------------------------------------------------------------------------
# Parameter accounting


FRACTION_MODES = ("finetune", "shallow-prompt", "deep-prompt", "deep-prompt+hypernet")


def hypernet_parameter_count(config: ModelConfig, hidden: int = 64,
                             injection: str | None = None) -> int:
    """Parameters of the prompt generator plus its trainable task embedding."""
    injection = injection or config.injection
    out = config.prompt_len * config.hidden_dim
    if injection == DEEP:
        out *= config.n_layers
    return hidden * config.hidden_dim + hidden + out * hidden + out + config.hidden_dim


def trainable_fraction(config: ModelConfig, mode: str, hypernet_hidden: int = 64) -> float:
    """Tunable / total parameter ratio for a tuning mode."""
    if mode not in FRACTION_MODES:
        raise ValueError(f"mode must be one of {FRACTION_MODES}, got {mode!r}")
    backbone_total = sum(parameter_counts(config).values())
    if mode == "finetune":
        return 1.0
    if mode == "shallow-prompt":
        extra = config.prompt_len * config.hidden_dim
    elif mode == "deep-prompt":
        extra = config.n_layers * config.prompt_len * config.hidden_dim
    else:
        extra = hypernet_parameter_count(config, hypernet_hidden, injection=DEEP)
    return extra / (backbone_total + extra)
