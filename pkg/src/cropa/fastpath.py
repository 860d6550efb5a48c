"""Fused loss-and-gradient evaluation used inside the attack loops.

These compute the same quantities as the tape-built losses in
:mod:`cropa.losses`, with hand-written vector-Jacobian products and the
encoder kernels from :mod:`cropa.kernels`.  The tape remains the reference;
the test suite holds the two to 1e-10.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .model import ToyVlm, TokenSeq, content_positions, patchify_array, unpatchify_array
from .tensor import COS_EPS


@dataclass
class EncoderPass:
    cache: tuple
    pooled: np.ndarray
    values: np.ndarray  # (L, H, P, head_dim), every layer


def encode(model: ToyVlm, image: np.ndarray) -> EncoderPass:
    patches = np.ascontiguousarray(patchify_array(image, model.arch))
    cache = kernels.encoder_forward(patches, model.patch_proj, model.w_q, model.w_k, model.w_v, model.w_o)
    xs = cache[0]
    return EncoderPass(cache, xs[-1].mean(axis=0), cache[3])


def image_grad(model: ToyVlm, enc: EncoderPass, g_pooled: np.ndarray, g_values: np.ndarray | None = None) -> np.ndarray:
    P = model.arch.num_patches
    g_out = np.broadcast_to(g_pooled / P, (P, model.arch.embed_dim))
    gp = kernels.encoder_backward(
        enc.cache, model.patch_proj, model.w_q, model.w_k, model.w_v, model.w_o, g_out, g_values
    )
    return unpatchify_array(gp, model.arch)


def prompt_rows(model: ToyVlm, prompt: TokenSeq) -> tuple[np.ndarray, list[int]]:
    keep = content_positions(prompt)
    return model.token_embed[[prompt.ids[i] for i in keep]], keep


def head(model: ToyVlm, pooled: np.ndarray, prompt: TokenSeq, delta_t: np.ndarray | None):
    rows, keep = prompt_rows(model, prompt)
    if delta_t is not None:
        rows = rows + delta_t[keep]
    pe = rows.mean(axis=0)
    z = np.concatenate([pooled, pe])
    h = np.tanh(z @ model.w_f)
    logits = (h + model.pos) @ model.token_embed.T
    return logits, (h, keep)


def logits(model: ToyVlm, image: np.ndarray, prompt: TokenSeq, delta_t: np.ndarray | None = None) -> np.ndarray:
    return head(model, encode(model, image).pooled, prompt, delta_t)[0]


def ce_and_grad(lg: np.ndarray, labels) -> tuple[float, np.ndarray]:
    n = len(labels)
    rows = np.arange(n)
    x = lg[:n]
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    loss = float(np.mean((m + np.log(s))[:, 0] - x[rows, labels]))
    g = np.zeros_like(lg)
    g[:n] = e / s
    g[rows, labels] -= 1.0
    g[:n] /= n
    return loss, g


def head_backward(model: ToyVlm, g_logits: np.ndarray, state, n_prompt: int):
    h, keep = state
    d = model.arch.embed_dim
    gh = (g_logits @ model.token_embed).sum(axis=0)
    gz = model.w_f @ (gh * (1.0 - h * h))
    g_dt = np.zeros((n_prompt, d))
    g_dt[keep] = gz[d:] / len(keep)
    return gz[:d], g_dt


def duap_terms(values: np.ndarray, reference: np.ndarray, layers) -> tuple[float, np.ndarray]:
    """Sum of (1 - cos) over the (layer, head) pairs and its gradient on ``values``."""
    total = 0.0
    grad = np.zeros_like(values)
    for l in layers:
        for h in range(values.shape[1]):
            v = values[l, h].reshape(-1)
            t = reference[l, h].reshape(-1)
            nv, nt = float(np.linalg.norm(v)), float(np.linalg.norm(t))
            if nv < COS_EPS or nt < COS_EPS:
                total += 1.0
                continue
            c = float(v @ t) / (nv * nt)
            total += 1.0 - c
            grad[l, h] = (-(t / (nv * nt) - c * v / (nv * nv))).reshape(values.shape[2:])
    return total, grad


def objective(
    model: ToyVlm,
    image: np.ndarray,
    prompt: TokenSeq,
    labels,
    delta_t: np.ndarray | None = None,
    duap_reference: np.ndarray | None = None,
    duap_coef: float = 0.0,
    sign: float = 1.0,
):
    """``sign * lm_loss + duap_coef * duap`` with gradients on image and delta_t.

    Returns ``(value, g_image, g_delta_t, parts)``.
    """
    enc = encode(model, image)
    lg, state = head(model, enc.pooled, prompt, delta_t)
    lm, g_lg = ce_and_grad(lg, labels)
    g_pooled, g_dt = head_backward(model, sign * g_lg, state, len(prompt.ids))
    value = sign * lm
    parts = {"lm": lm}
    g_values = None
    if duap_reference is not None:
        du, g_du = duap_terms(enc.values, duap_reference, model.arch.value_layers)
        parts["duap"] = du
        if duap_coef != 0.0:
            value += duap_coef * du
            g_values = duap_coef * g_du
    g_img = image_grad(model, enc, g_pooled, g_values)
    return value, g_img, g_dt, parts


def mse_objective(model: ToyVlm, image: np.ndarray, target_pooled: np.ndarray) -> tuple[float, np.ndarray]:
    enc = encode(model, image)
    diff = enc.pooled - target_pooled
    return float(diff @ diff), image_grad(model, enc, 2.0 * diff)


def greedy_ids(model: ToyVlm, pooled: np.ndarray, prompt: TokenSeq) -> tuple[int, ...]:
    lg = head(model, pooled, prompt, None)[0]
    return tuple(int(i) for i in np.argmax(lg, axis=-1))

