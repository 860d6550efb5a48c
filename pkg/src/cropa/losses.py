"""Attack objectives built on the tape.

Every function takes the image the model actually sees (the caller adds the
perturbation and clips to [0, 1]) and returns a scalar :class:`Tensor`, so
each can be differentiated with :func:`cropa.tensor.backward` or checked with
:func:`cropa.tensor.grad_check`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .model import TokenSeq, ToyVlm, encode_prompt, forward_logits, greedy, head_logits, lm_loss, vision_encode
from .tensor import Tensor

LOSS_KINDS = ("targeted", "untargeted", "vision_mse", "duap_align", "duap_deviate", "recropa")
DUAP_MODES = ("align", "deviate")
SIGN_MODES = ("align", "literal_eq12")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "recropa"
    lam: float = 5.0
    duap_sign_mode: str = "align"

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.duap_sign_mode not in SIGN_MODES:
            raise ValueError(f"unknown duap_sign_mode {self.duap_sign_mode!r}")

    @property
    def duap_coef(self) -> float:
        """Signed weight on the alignment term inside the minimized objective."""
        return self.lam if self.duap_sign_mode == "align" else -self.lam


def clip01(image: np.ndarray, delta_v: np.ndarray | None = None) -> np.ndarray:
    x = image if delta_v is None else image + delta_v
    return np.clip(x, 0.0, 1.0)


def targeted_loss(model: ToyVlm, image, prompt: TokenSeq, target: TokenSeq, delta_t: Tensor | None = None) -> Tensor:
    return lm_loss(forward_logits(model, image, prompt, delta_t), target)


def clean_labels(model: ToyVlm, clean_image, prompt: TokenSeq) -> tuple[int, ...]:
    """Greedy output ids of the clean image; recomputed on every call."""
    clean = clean_image.data if isinstance(clean_image, Tensor) else np.asarray(clean_image)
    return greedy(forward_logits(model, Tensor(clean), prompt).data)


def untargeted_loss(
    model: ToyVlm, image, prompt: TokenSeq, clean_image, delta_t: Tensor | None = None
) -> Tensor:
    """Cross-entropy of the perturbed logits against the clean greedy tokens.

    The attacker ascends this value.
    """
    labels = clean_labels(model, clean_image, prompt)
    return T.cross_entropy(forward_logits(model, image, prompt, delta_t), labels)


def vision_mse(model: ToyVlm, image, target_image) -> Tensor:
    """Squared L2 distance between pooled encoder outputs."""
    target = target_image if isinstance(target_image, Tensor) else Tensor(target_image)
    a = vision_encode(model, image).pooled
    b = vision_encode(model, Tensor(target.data)).pooled
    return T.sq_l2(a, b)


def duap_loss(
    values_adv: Mapping[tuple[int, int], Tensor],
    values_ref: Mapping[tuple[int, int], Tensor],
    mode: str = "align",
) -> Tensor:
    """Sum over (layer, head) of 1 - cos(flat(V_adv), flat(V_ref)).

    In ``align`` mode the reference holds the target image's value vectors and
    the term is minimized; in ``deviate`` mode it holds the clean image's and
    the term is maximized.  A zero-norm pair counts as orthogonal.
    """
    if mode not in DUAP_MODES:
        raise ValueError(f"unknown duap mode {mode!r}")
    if set(values_adv) != set(values_ref):
        raise ValueError(f"value-vector index sets differ: {sorted(values_adv)} vs {sorted(values_ref)}")
    total = None
    for key in sorted(values_adv):
        a, r = values_adv[key], values_ref[key]
        if tuple(a.shape) != tuple(r.shape):
            raise ValueError(f"value-vector shapes differ at {key}: {a.shape} vs {r.shape}")
        cos = T.cosine_similarity(T.reshape(a, (-1,)), T.reshape(r, (-1,)))
        term = T.subtract(Tensor(1.0), cos)
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ValueError("no value vectors to compare")
    return total


def target_values(model: ToyVlm, target_image) -> dict[tuple[int, int], Tensor]:
    data = target_image.data if isinstance(target_image, Tensor) else np.asarray(target_image)
    values = vision_encode(model, Tensor(data)).values
    return {k: Tensor(v.data) for k, v in values.items()}


def recropa_loss(
    model: ToyVlm,
    image,
    prompt: TokenSeq,
    target: TokenSeq,
    target_image=None,
    spec: LossSpec = LossSpec(),
    delta_t: Tensor | None = None,
    reference_values: Mapping[tuple[int, int], Tensor] | None = None,
) -> Tensor:
    """Targeted loss plus the signed, weighted alignment term.

    ``align`` adds ``lam * duap``; ``literal_eq12`` subtracts it.
    """
    image = image if isinstance(image, Tensor) else Tensor(image)
    vis = vision_encode(model, image)
    lm = lm_loss(head_logits(model, vis.pooled, encode_prompt(model, prompt, delta_t)), target)
    if spec.lam == 0:
        return lm
    ref = reference_values if reference_values is not None else target_values(model, target_image)
    du = duap_loss(vis.values, ref, "align")
    return T.add(lm, T.scale(du, spec.duap_coef))
