"""Pure-numpy encoder kernels: one transformer layer, forward and backward.

This is the reference implementation of the backend API (see
``promptstream.kernels``). A layer is pre-norm: attention and feed-forward
sublayers each read a layer-normed copy of the residual stream and add back
into it. The attention sublayer optionally receives a prefix block of
``prompt_len`` vectors treated exactly like extra tokens entering the
sublayer: normed by the layer's input LN, projected through the frozen
key/value maps, and concatenated in front of the per-token keys/values.
Queries never attend from the prefix, only to it. Norming the prefix makes
its influence independent of the raw prompt scale, so small random inits
still steer attention.

Backward is hand-derived. It always produces the gradient with respect to
the layer input, and on request the gradients with respect to the prefix
block and/or all 16 layer parameters (in ``LAYER_KEYS`` order). Everything
runs in float64 so analytic gradients can be checked against central finite
differences at tight tolerance.
"""

import numpy as np

BACKEND_NAME = "reference"

LN_EPS = 1e-5
_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_K = 0.044715

# Canonical ordering of per-layer parameter arrays in the backend API.
LAYER_KEYS = (
    "ln1_g", "ln1_b",
    "Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo",
    "ln2_g", "ln2_b",
    "Wf1", "bf1", "Wf2", "bf2",
)


def gelu(x):
    t = np.tanh(_GELU_C * (x + _GELU_K * x**3))
    return 0.5 * x * (1.0 + t)


def gelu_grad(x):
    t = np.tanh(_GELU_C * (x + _GELU_K * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)


def layer_norm(x, g, b):
    """Row-wise layer norm; returns (y, xhat, rstd) with backward inputs cached."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, xhat, rstd


def layer_norm_backward(dy, xhat, rstd, g):
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _softmax_rows(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def layer_forward(H, params, prefix, n_heads):
    """Run one layer on H (S, d); prefix is (lp, d) or None.

    Returns (Hout, cache); the cache is opaque and only valid for this
    backend's layer_backward.
    """
    (ln1_g, ln1_b, Wq, bq, Wk, bk, Wv, bv, Wo, bo,
     ln2_g, ln2_b, Wf1, bf1, Wf2, bf2) = params
    S, d = H.shape
    dh = d // n_heads

    A1, xhat1, rstd1 = layer_norm(H, ln1_g, ln1_b)
    Q = A1 @ Wq + bq
    K = A1 @ Wk + bk
    V = A1 @ Wv + bv
    if prefix is not None:
        Ap, xhatp, rstdp = layer_norm(prefix, ln1_g, ln1_b)
        Kc = np.concatenate([Ap @ Wk + bk, K], axis=0)
        Vc = np.concatenate([Ap @ Wv + bv, V], axis=0)
    else:
        Ap, xhatp, rstdp = None, None, None
        Kc, Vc = K, V
    T = Kc.shape[0]

    Qh = Q.reshape(S, n_heads, dh).transpose(1, 0, 2)
    Kh = Kc.reshape(T, n_heads, dh).transpose(1, 0, 2)
    Vh = Vc.reshape(T, n_heads, dh).transpose(1, 0, 2)
    P = _softmax_rows(Qh @ Kh.transpose(0, 2, 1) / np.sqrt(dh))
    O = (P @ Vh).transpose(1, 0, 2).reshape(S, d)

    H2 = H + O @ Wo + bo
    A2, xhat2, rstd2 = layer_norm(H2, ln2_g, ln2_b)
    F1 = A2 @ Wf1 + bf1
    G = gelu(F1)
    Hout = H2 + G @ Wf2 + bf2

    cache = (A1, xhat1, rstd1, Q, Kc, Vc, P, O, xhat2, rstd2, A2, F1, G,
             Ap, xhatp, rstdp)
    return Hout, cache


def layer_backward(dHout, cache, params, n_heads,
                   need_param_grads=False, need_prefix_grad=False):
    """Backward through one layer.

    Returns (dH, dprefix, param_grads); dprefix / param_grads are None when
    not requested. param_grads is a tuple in LAYER_KEYS order.
    """
    (ln1_g, ln1_b, Wq, bq, Wk, bk, Wv, bv, Wo, bo,
     ln2_g, ln2_b, Wf1, bf1, Wf2, bf2) = params
    (A1, xhat1, rstd1, Q, Kc, Vc, P, O, xhat2, rstd2, A2, F1, G,
     Ap, xhatp, rstdp) = cache
    S, d = dHout.shape
    dh = d // n_heads
    T = Kc.shape[0]
    lp = 0 if Ap is None else Ap.shape[0]

    # Feed-forward sublayer.
    dG = dHout @ Wf2.T
    dF1 = dG * gelu_grad(F1)
    dA2 = dF1 @ Wf1.T
    dH2_ln, dg2, db2 = layer_norm_backward(dA2, xhat2, rstd2, ln2_g)
    dH2 = dHout + dH2_ln

    # Attention sublayer.
    dO = dH2 @ Wo.T
    dOh = dO.reshape(S, n_heads, dh).transpose(1, 0, 2)
    Kh = Kc.reshape(T, n_heads, dh).transpose(1, 0, 2)
    Vh = Vc.reshape(T, n_heads, dh).transpose(1, 0, 2)
    Qh = Q.reshape(S, n_heads, dh).transpose(1, 0, 2)
    dP = dOh @ Vh.transpose(0, 2, 1)
    dVh = P.transpose(0, 2, 1) @ dOh
    dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) / np.sqrt(dh)
    dQh = dS @ Kh
    dKh = dS.transpose(0, 2, 1) @ Qh

    dQ = dQh.transpose(1, 0, 2).reshape(S, d)
    dKc = dKh.transpose(1, 0, 2).reshape(T, d)
    dVc = dVh.transpose(1, 0, 2).reshape(T, d)
    dKp, dK = dKc[:lp], dKc[lp:]
    dVp, dV = dVc[:lp], dVc[lp:]

    dA1 = dQ @ Wq.T + dK @ Wk.T + dV @ Wv.T
    dH_ln1, dg1, db1 = layer_norm_backward(dA1, xhat1, rstd1, ln1_g)
    dH = dH2 + dH_ln1

    dprefix = None
    dgp = dbp = None
    if lp and (need_prefix_grad or need_param_grads):
        dAp = dKp @ Wk.T + dVp @ Wv.T
        dprefix_full, dgp, dbp = layer_norm_backward(dAp, xhatp, rstdp, ln1_g)
        if need_prefix_grad:
            dprefix = dprefix_full

    param_grads = None
    if need_param_grads:
        dWq = A1.T @ dQ
        dWk = A1.T @ dK
        dWv = A1.T @ dV
        dbk = dK.sum(axis=0)
        dbv = dV.sum(axis=0)
        if lp:
            dWk += Ap.T @ dKp
            dWv += Ap.T @ dVp
            dbk = dbk + dKp.sum(axis=0)
            dbv = dbv + dVp.sum(axis=0)
            dg1 = dg1 + dgp
            db1 = db1 + dbp
        param_grads = (
            dg1, db1,
            dWq, dQ.sum(axis=0), dWk, dbk, dWv, dbv,
            O.T @ dH2, dH2.sum(axis=0),
            dg2, db2,
            A2.T @ dF1, dF1.sum(axis=0), G.T @ dHout, dHout.sum(axis=0),
        )
    return dH, dprefix, param_grads
