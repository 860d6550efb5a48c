"""Seeded miniature vision-language model.

Vision side: 8x8 patches of a 3x32x32 image are projected to ``d`` dims and
passed through attention-only layers with residual connections; the pooled
embedding is the patch mean of the last layer.  Text side: the prompt
embedding is the mean of its token rows (plus any prompt perturbation).  The
fusion head computes ``h = tanh(concat(pooled, prompt) @ W_f)`` and scores
every output position ``t`` as ``(h + pos[t]) @ token_embed.T``.

Weights are drawn uniform(-0.1, 0.1) from ``Rng(seed)`` in this order, each
matrix row-major: ``patch_proj``; then for every layer, for every head,
``W_q, W_k, W_v``, followed by that layer's ``W_o``; then ``token_embed``,
``W_f`` and ``pos``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor

PAD = 0
UNK = 1
TASKS = ("vqa_general", "vqa_specific", "classification", "captioning")
WEIGHT_BOUND = 0.1


@dataclass(frozen=True)
class VlmArch:
    image_channels: int = 3
    image_side: int = 32
    patch_side: int = 8
    embed_dim: int = 32
    num_layers: int = 4
    heads_per_layer: int = 2
    head_dim: int = 16
    vocab_size: int = 64
    max_prompt_len: int = 8
    max_output_len: int = 4
    value_layers: tuple[int, ...] = (2, 3)

    def __post_init__(self):
        dims = (
            self.image_channels,
            self.image_side,
            self.patch_side,
            self.embed_dim,
            self.num_layers,
            self.heads_per_layer,
            self.head_dim,
            self.vocab_size,
            self.max_prompt_len,
            self.max_output_len,
        )
        if any(x <= 0 for x in dims):
            raise ValueError("all architecture dimensions must be positive")
        if self.image_side % self.patch_side:
            raise ValueError("image_side must be divisible by patch_side")
        if self.heads_per_layer * self.head_dim != self.embed_dim:
            raise ValueError("heads_per_layer * head_dim must equal embed_dim")
        if any(not 0 <= l < self.num_layers for l in self.value_layers):
            raise ValueError("value_layers outside the layer range")
        if self.vocab_size < 3:
            raise ValueError("vocabulary needs pad, unknown and at least one word")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_side

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.image_channels * self.patch_side * self.patch_side

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.image_channels, self.image_side, self.image_side)


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    task_tag: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if self.task_tag is not None and self.task_tag not in TASKS:
            raise ValueError(f"unknown task tag {self.task_tag!r}")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True, eq=False)
class ToyVlm:
    arch: VlmArch
    seed: int
    patch_proj: np.ndarray
    w_q: np.ndarray  # (L, H, d, head_dim)
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray  # (L, d, d)
    token_embed: np.ndarray  # (vocab, d)
    w_f: np.ndarray  # (2d, d)
    pos: np.ndarray  # (max_output_len, d)

    def weight_arrays(self) -> list[np.ndarray]:
        """Arrays in draw order (per-head slices for the attention weights)."""
        a = self.arch
        out = [self.patch_proj]
        for l in range(a.num_layers):
            for h in range(a.heads_per_layer):
                out += [self.w_q[l, h], self.w_k[l, h], self.w_v[l, h]]
            out.append(self.w_o[l])
        out += [self.token_embed, self.w_f, self.pos]
        return out

    def export_weights(self) -> bytes:
        """Little-endian float64 dump of every weight in draw order."""
        return b"".join(np.ascontiguousarray(w, dtype="<f8").tobytes() for w in self.weight_arrays())


def build_model(seed: int = 42, arch: VlmArch | None = None) -> ToyVlm:
    arch = arch or VlmArch()
    rng = Rng(seed)
    lo, hi = -WEIGHT_BOUND, WEIGHT_BOUND

    def draw(*shape: int) -> np.ndarray:
        n = math.prod(shape)
        return np.array([rng.uniform(lo, hi) for _ in range(n)], dtype=np.float64).reshape(shape)

    d, hd, L, H = arch.embed_dim, arch.head_dim, arch.num_layers, arch.heads_per_layer
    patch_proj = draw(arch.patch_dim, d)
    w_q = np.empty((L, H, d, hd))
    w_k = np.empty((L, H, d, hd))
    w_v = np.empty((L, H, d, hd))
    w_o = np.empty((L, d, d))
    for l in range(L):
        for h in range(H):
            w_q[l, h] = draw(d, hd)
            w_k[l, h] = draw(d, hd)
            w_v[l, h] = draw(d, hd)
        w_o[l] = draw(d, d)
    token_embed = draw(arch.vocab_size, d)
    w_f = draw(2 * d, d)
    pos = draw(arch.max_output_len, d)
    arrays = dict(
        patch_proj=patch_proj, w_q=w_q, w_k=w_k, w_v=w_v, w_o=w_o, token_embed=token_embed, w_f=w_f, pos=pos
    )
    for arr in arrays.values():
        arr.setflags(write=False)
    return ToyVlm(arch=arch, seed=seed, **arrays)


# ------------------------------------------------------------------ helpers


def patchify_array(image: np.ndarray, arch: VlmArch) -> np.ndarray:
    """(C, S, S) -> (num_patches, patch_dim); patches row-major, features (c, i, j)."""
    c, g, p = arch.image_channels, arch.grid, arch.patch_side
    return image.reshape(c, g, p, g, p).transpose(1, 3, 0, 2, 4).reshape(g * g, c * p * p)


def unpatchify_array(patches: np.ndarray, arch: VlmArch) -> np.ndarray:
    c, g, p = arch.image_channels, arch.grid, arch.patch_side
    return patches.reshape(g, g, c, p, p).transpose(2, 0, 3, 1, 4).reshape(c, g * p, g * p)


def _patchify(image: Tensor, arch: VlmArch) -> Tensor:
    c, g, p = arch.image_channels, arch.grid, arch.patch_side
    x = T.reshape(image, (c, g, p, g, p))
    x = T.transpose(x, (1, 3, 0, 2, 4))
    return T.reshape(x, (g * g, c * p * p))


def check_image(model: ToyVlm, image) -> None:
    shape = image.shape
    if tuple(shape) != model.arch.image_shape:
        raise ValueError(f"image must have shape {model.arch.image_shape}, got {tuple(shape)}")


# ----------------------------------------------------------------- forward


class VisionOutput(NamedTuple):
    patches: Tensor  # final-layer patch embeddings (P, d)
    pooled: Tensor  # (d,)
    values: dict[tuple[int, int], Tensor]  # (layer, head) -> (P, head_dim)
    layer_inputs: list[Tensor]  # X_l for every layer


def vision_encode(model: ToyVlm, image: Tensor, value_layers: Sequence[int] | None = None) -> VisionOutput:
    """Run the vision encoder.  Value vectors are kept for ``value_layers``."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    check_image(model, image)
    a = model.arch
    keep = set(a.value_layers if value_layers is None else value_layers)
    x = T.matmul(_patchify(image, a), Tensor(model.patch_proj))
    inv = 1.0 / math.sqrt(a.head_dim)
    values: dict[tuple[int, int], Tensor] = {}
    inputs = []
    for l in range(a.num_layers):
        inputs.append(x)
        heads = []
        for h in range(a.heads_per_layer):
            q = T.matmul(x, Tensor(model.w_q[l, h]))
            k = T.matmul(x, Tensor(model.w_k[l, h]))
            v = T.matmul(x, Tensor(model.w_v[l, h]))
            att = T.softmax(T.scale(T.matmul(q, T.transpose(k)), inv))
            heads.append(T.matmul(att, v))
            if l in keep:
                values[(l, h)] = v
        mixed = T.matmul(T.concat(heads, axis=1), Tensor(model.w_o[l]))
        x = T.add(x, mixed)
    return VisionOutput(x, T.mean(x, axis=0), values, inputs)


def attention_maps(model: ToyVlm, image: np.ndarray) -> dict[tuple[int, int], np.ndarray]:
    """Attention matrices per (layer, head), for inspection and tests."""
    a = model.arch
    x = patchify_array(np.asarray(image, dtype=np.float64), a) @ model.patch_proj
    maps = {}
    for l in range(a.num_layers):
        heads = []
        for h in range(a.heads_per_layer):
            q, k, v = x @ model.w_q[l, h], x @ model.w_k[l, h], x @ model.w_v[l, h]
            s = q @ k.T / math.sqrt(a.head_dim)
            e = np.exp(s - s.max(axis=1, keepdims=True))
            att = e / e.sum(axis=1, keepdims=True)
            maps[(l, h)] = att
            heads.append(att @ v)
        x = x + np.concatenate(heads, axis=1) @ model.w_o[l]
    return maps


def check_prompt(model: ToyVlm, prompt: TokenSeq) -> None:
    a = model.arch
    if len(prompt.ids) == 0:
        raise ValueError("empty prompt")
    if len(prompt.ids) > a.max_prompt_len:
        raise ValueError(f"prompt longer than {a.max_prompt_len} tokens")
    for i in prompt.ids:
        if not 0 <= i < a.vocab_size:
            raise ValueError(f"token id {i} outside vocabulary of size {a.vocab_size}")


def content_positions(prompt: TokenSeq) -> list[int]:
    """Positions that carry a real token (pads are skipped)."""
    return [i for i, t in enumerate(prompt.ids) if t != PAD]


def encode_prompt(model: ToyVlm, prompt: TokenSeq, delta_t: Tensor | None = None) -> Tensor:
    """Mean of ``token_embed[id] + delta_t[pos]`` over non-pad positions."""
    check_prompt(model, prompt)
    d = model.arch.embed_dim
    keep = content_positions(prompt)
    if not keep:
        raise ValueError("prompt has no non-pad tokens")
    rows = Tensor(model.token_embed[[prompt.ids[i] for i in keep]])
    if delta_t is None:
        return T.mean(rows, axis=0)
    if tuple(delta_t.shape) != (len(prompt.ids), d):
        raise ValueError(f"delta_t must have shape {(len(prompt.ids), d)}, got {tuple(delta_t.shape)}")
    if len(keep) != len(prompt.ids):
        # select content rows of delta_t through a constant 0/1 matrix
        sel = np.zeros((len(keep), len(prompt.ids)))
        sel[np.arange(len(keep)), keep] = 1.0
        delta_t = T.matmul(Tensor(sel), delta_t)
    return T.mean(T.add(rows, delta_t), axis=0)


def head_logits(model: ToyVlm, pooled: Tensor, prompt_embedding: Tensor) -> Tensor:
    h = T.tanh(T.matmul(T.concat([pooled, prompt_embedding], axis=0), Tensor(model.w_f)))
    return T.matmul(T.add(h, Tensor(model.pos)), T.transpose(Tensor(model.token_embed)))


def forward_logits(model: ToyVlm, image, prompt: TokenSeq, delta_t: Tensor | None = None) -> Tensor:
    """Logits of shape (max_output_len, vocab_size)."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    pooled = vision_encode(model, image).pooled
    return head_logits(model, pooled, encode_prompt(model, prompt, delta_t))


def greedy(logits: np.ndarray) -> tuple[int, ...]:
    # np.argmax returns the first maximum, i.e. the lowest id on ties
    return tuple(int(i) for i in np.argmax(logits, axis=-1))


def generate(model: ToyVlm, image, prompt: TokenSeq) -> TokenSeq:
    """Greedy argmax at every output position (raw ids, pads included)."""
    logits = forward_logits(model, image, prompt)
    return TokenSeq(greedy(logits.data), prompt.task_tag)


def strip_output(ids: Sequence[int]) -> tuple[int, ...]:
    """Decoded content: everything before the first pad (pad doubles as end marker)."""
    out = []
    for i in ids:
        if i == PAD:
            break
        out.append(int(i))
    return tuple(out)


def target_labels(target: TokenSeq | Sequence[int], max_output_len: int) -> list[int]:
    """Scored label positions of a target: its tokens, then one end marker when room remains."""
    ids = list(target.ids if isinstance(target, TokenSeq) else target)
    ids = [i for i in ids if i != PAD]
    if not ids:
        raise ValueError("empty target")
    if len(ids) > max_output_len:
        raise ValueError(f"target longer than {max_output_len} tokens")
    if len(ids) < max_output_len:
        ids.append(PAD)
    return ids


def lm_loss(logits: Tensor, target: TokenSeq | Sequence[int]) -> Tensor:
    """Mean cross-entropy over the target's scored positions.

    Positions after the end marker are excluded.
    """
    labels = target_labels(target, logits.shape[0])
    if len(labels) == logits.shape[0]:
        return T.cross_entropy(logits, labels)
    sel = np.zeros((len(labels), logits.shape[0]))
    sel[np.arange(len(labels)), np.arange(len(labels))] = 1.0
    return T.cross_entropy(T.matmul(Tensor(sel), logits), labels)
