"""Masked-token pretraining of the backbone on the synthetic corpus.

Plain SGD with global-norm gradient clipping on the mean cross-entropy of
re-predicting masked tokens. Once trained, every parameter is snapped to
float32-representable values (the checkpoint precision) and the backbone is
frozen, so the in-memory digest matches the checkpoint digest exactly.
"""

import numpy as np

from .config import MASK_ID, ModelConfig
from .container import snap_f32
from .model import (
    Backbone,
    NumericsError,
    _encode_backward,
    encode_tokens,
    init_backbone_params,
    softmax,
)
from .rng import substream


def masked_batch_loss_and_grads(backbone, sentences, mask_positions, need_grads=True):
    """Mean masked-token NLL over a batch; gradients for all parameters.

    ``sentences`` are token-id lists; ``mask_positions`` gives, per sentence,
    the positions whose original tokens must be re-predicted.
    """
    tok_emb = backbone.params["tok_emb"]
    grads = {name: np.zeros_like(arr) for name, arr in backbone.params.items()} if need_grads else None
    loss_sum = 0.0
    n_predictions = 0
    for ids, positions in zip(sentences, mask_positions):
        corrupted = list(ids)
        for p in positions:
            corrupted[p] = MASK_ID
        Hf, enc_cache = encode_tokens(backbone, corrupted, want_cache=need_grads)
        dHf = np.zeros_like(Hf) if need_grads else None
        for p in positions:
            logits = Hf[p] @ tok_emb.T + backbone.params["mlm_bias"]
            probs = softmax(logits)
            loss_sum += -np.log(probs[ids[p]])
            n_predictions += 1
            if need_grads:
                dlogits = probs.copy()
                dlogits[ids[p]] -= 1.0
                dHf[p] += dlogits @ tok_emb
                grads["mlm_bias"] += dlogits
                grads["tok_emb"] += np.outer(dlogits, Hf[p])
        if need_grads:
            dH0, _, param_grads = _encode_backward(backbone, enc_cache, dHf, need_param_grads=True)
            for name, g in param_grads.items():
                grads[name] += g
            np.add.at(grads["tok_emb"], corrupted, dH0)
            grads["pos_emb"][: dH0.shape[0]] += dH0
    if n_predictions == 0:
        raise ValueError("no masked positions in batch")
    loss = loss_sum / n_predictions
    if need_grads:
        grads = {name: g / n_predictions for name, g in grads.items()}
    return loss, grads


def _choose_masks(rng, length, mask_prob):
    n = max(1, int(round(mask_prob * length)))
    return sorted(int(i) for i in rng.choice(length, size=n, replace=False))


def held_out_loss(backbone, sentences, mask_prob=0.15, seed=0):
    """Masked-prediction loss on held-out sentences with a fixed masking draw."""
    rng = substream(seed, "held-out-masks")
    positions = [_choose_masks(rng, len(s), mask_prob) for s in sentences]
    loss, _ = masked_batch_loss_and_grads(backbone, sentences, positions, need_grads=False)
    return loss


def _clip(grads, max_norm):
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale


def pretrain_backbone(config: ModelConfig, corpus, steps=1500, batch_size=16,
                      lr=0.5, mask_prob=0.15, seed=0, log_every=0) -> Backbone:
    """Train a fresh backbone on the corpus, then snap to f32 and freeze."""
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    backbone = Backbone(config, init_backbone_params(config, substream(seed, "backbone-init")))
    rng = substream(seed, "pretrain-batches")
    n = len(corpus)
    for step in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        batch = [corpus[i] for i in idx]
        positions = [_choose_masks(rng, len(s), mask_prob) for s in batch]
        loss, grads = masked_batch_loss_and_grads(backbone, batch, positions)
        if not np.isfinite(loss):
            raise NumericsError(f"pretraining diverged at step {step} (loss not finite)")
        _clip(grads, 1.0)
        for name, g in grads.items():
            backbone.params[name] -= lr * g
        if log_every and (step % log_every == 0 or step == steps - 1):
            print(f"pretrain step {step:5d}  masked-token loss {loss:.4f}")
    backbone.params = {name: snap_f32(arr) for name, arr in backbone.params.items()}
    backbone._rebuild_layer_cache()
    return backbone.freeze()
