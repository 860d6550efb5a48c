"""Fused vision-encoder kernels in plain numpy (fallback backend).

Same contract as the compiled ``_encoder`` extension: ``encoder_forward``
returns the activation cache ``(xs, q, k, v, att, heads)`` and
``encoder_backward`` maps gradients on the final patch embeddings (and
optionally on the value vectors) back to gradients on the input patches.
"""

import math

import numpy as np


def encoder_forward(patches, proj, wq, wk, wv, wo):
    L, H, d, hd = wq.shape
    P = patches.shape[0]
    inv = 1.0 / math.sqrt(hd)
    xs = np.empty((L + 1, P, d))
    q = np.empty((L, H, P, hd))
    k = np.empty((L, H, P, hd))
    v = np.empty((L, H, P, hd))
    att = np.empty((L, H, P, P))
    heads = np.empty((L, P, d))
    xs[0] = patches @ proj
    for l in range(L):
        x = xs[l]
        for h in range(H):
            q[l, h] = x @ wq[l, h]
            k[l, h] = x @ wk[l, h]
            v[l, h] = x @ wv[l, h]
            s = (q[l, h] @ k[l, h].T) * inv
            s -= s.max(axis=1, keepdims=True)
            e = np.exp(s)
            att[l, h] = e / e.sum(axis=1, keepdims=True)
            heads[l, :, h * hd:(h + 1) * hd] = att[l, h] @ v[l, h]
        xs[l + 1] = x + heads[l] @ wo[l]
    return xs, q, k, v, att, heads


def encoder_backward(cache, proj, wq, wk, wv, wo, g_out, g_values=None):
    xs, q, k, v, att, heads = cache
    L, H, d, hd = wq.shape
    inv = 1.0 / math.sqrt(hd)
    g = np.array(g_out, dtype=np.float64)
    for l in range(L - 1, -1, -1):
        gx = g.copy()
        gheads = g @ wo[l].T
        for h in range(H):
            a = att[l, h]
            gh = gheads[:, h * hd:(h + 1) * hd]
            ga = gh @ v[l, h].T
            gv = a.T @ gh
            if g_values is not None:
                gv = gv + g_values[l, h]
            gs = a * (ga - (ga * a).sum(axis=1, keepdims=True)) * inv
            gq = gs @ k[l, h]
            gk = gs.T @ q[l, h]
            gx += gq @ wq[l, h].T + gk @ wk[l, h].T + gv @ wv[l, h].T
        g = gx
    return g @ proj.T
