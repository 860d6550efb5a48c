"""Input mixing (self/cross mix and CutMix) and the universal-perturbation loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attacks import (
    AttackResult,
    Monitor,
    Perturbation,
    clean_output_ids,
    evaluate_objective,
    is_text_update,
    pgd_image_step,
    pgd_text_step,
    project_linf,
)
from .config import AttackConfig, AugmentConfig
from .data_io import bilinear_resize
from .model import TokenSeq, ToyVlm, check_image, target_labels
from .rng import Rng

INIT_MODES = ("gaussian", "zero")
_INIT_SALT = 0x1A17


@dataclass(frozen=True)
class RectMask:
    top: int
    left: int
    height: int
    width: int
    side: int = 32

    def __post_init__(self):
        if not (1 <= self.height <= self.side and 1 <= self.width <= self.side):
            raise ValueError(f"mask size {self.height}x{self.width} outside 1..{self.side}")
        if self.top < 0 or self.left < 0 or self.top + self.height > self.side or self.left + self.width > self.side:
            raise ValueError(f"mask at ({self.top}, {self.left}) does not fit in the image")

    def array(self) -> np.ndarray:
        m = np.zeros((self.side, self.side))
        m[self.top : self.top + self.height, self.left : self.left + self.width] = 1.0
        return m


def sample_mask(rng: Rng, side: int = 32, min_side: int = 8, max_side: int = 24) -> RectMask:
    h = rng.randint(min_side, max_side)
    w = rng.randint(min_side, max_side)
    top = rng.randint(0, side - h)
    left = rng.randint(0, side - w)
    return RectMask(top, left, h, w, side)


def crop_resize(image: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    _, h, w = image.shape
    return bilinear_resize(image[:, top : top + size, left : left + size], h, w)


def random_crop_resize(image: np.ndarray, rng: Rng, min_fraction: float = 0.5) -> np.ndarray:
    """Square crop with side uniform in [ceil(min_fraction * side), side], resized back."""
    side = image.shape[1]
    size = rng.randint(max(1, math.ceil(min_fraction * side)), side)
    top = rng.randint(0, side - size)
    left = rng.randint(0, side - size)
    return np.clip(crop_resize(image, top, left, size), 0.0, 1.0)


def self_mix(image: np.ndarray, rng: Rng, eta: float = 0.5, min_fraction: float = 0.5) -> np.ndarray:
    if not 0 <= eta <= 1:
        raise ValueError("eta must lie in [0, 1]")
    x1 = random_crop_resize(image, rng, min_fraction)
    x2 = random_crop_resize(image, rng, min_fraction)
    return eta * x1 + (1 - eta) * x2


def cross_mix(mixed: np.ndarray, other: np.ndarray, beta1: float = 0.7, beta2: float = 0.3) -> np.ndarray:
    if beta1 < 0 or beta2 < 0 or beta1 + beta2 > 1 + 1e-12:
        raise ValueError("need beta1, beta2 >= 0 and beta1 + beta2 <= 1")
    return beta1 * mixed + beta2 * other


def scmix(
    image: np.ndarray, partner: np.ndarray, config: AugmentConfig, rng: Rng, same: bool = False
) -> np.ndarray:
    """Self-mix two crops of ``image``, then blend in ``partner``; unmixed if the partner is itself."""
    if same or partner is image:
        return image
    return cross_mix(self_mix(image, rng, config.eta, config.crop_min_fraction), partner, config.beta1, config.beta2)


def cutmix(x_a: np.ndarray, x_b: np.ndarray, mask: RectMask) -> np.ndarray:
    """``x_a`` inside the rectangle, ``x_b`` outside."""
    m = mask.array()
    return m * x_a + (1.0 - m) * x_b


def augment_image(
    images: Sequence[np.ndarray], index: int, config: AugmentConfig, rng: Rng
) -> np.ndarray:
    """The training view of image ``index`` for one step (partner drawn uniformly)."""
    base = images[index]
    if config.mode == "none":
        return base
    j = rng.randbelow(len(images))
    if config.mode == "scmix":
        return scmix(base, images[j], config, rng, same=(j == index))
    # the partner's pixels fill the rectangle
    mask = sample_mask(rng, base.shape[1], config.cutmix_min_side, config.cutmix_max_side)
    return cutmix(images[j], base, mask)


def gaussian_init(shape: tuple[int, ...], epsilon: float, rng: Rng) -> np.ndarray:
    """N(0, epsilon^2) draws in row-major order, projected onto the epsilon ball."""
    n = int(np.prod(shape))
    draws = np.array([rng.gauss(epsilon) for _ in range(n)])
    return project_linf(draws.reshape(shape), epsilon)


def attack_cross_image(
    model: ToyVlm,
    images: Sequence[np.ndarray],
    prompts: Sequence[TokenSeq] | Sequence[Sequence[TokenSeq]],
    target: TokenSeq | None,
    config: AttackConfig,
    augment: AugmentConfig = AugmentConfig(),
    init: str = "gaussian",
    monitor: Monitor | None = None,
    engine: str = "fast",
) -> AttackResult:
    """One image perturbation shared by every training image.

    Each outer iteration visits all images in order; per image: sample a
    prompt, build the (optionally mixed) training view, take a sign step on
    the shared perturbation, update that prompt's text perturbation on the
    schedule, and project.
    """
    if init not in INIT_MODES:
        raise ValueError(f"unknown init {init!r}")
    t0 = time.perf_counter()
    images = [np.asarray(x, dtype=np.float64) for x in images]
    if not images:
        raise ValueError("need at least one image")
    for x in images:
        check_image(model, x)
    if prompts and isinstance(prompts[0], TokenSeq):
        per_image = [list(prompts)[: config.prompt_count] for _ in images]
    else:
        per_image = [list(ps)[: config.prompt_count] for ps in prompts]
    if len(per_image) != len(images) or any(not ps for ps in per_image):
        raise ValueError("every image needs a non-empty prompt list")

    eps = config.epsilon
    rng = Rng(config.seed)
    if init == "gaussian":
        delta = gaussian_init(images[0].shape, eps, rng.fork(_INIT_SALT))
    else:
        delta = np.zeros_like(images[0])
    sign = 1.0 if target is not None else -1.0
    fixed = target_labels(target, model.arch.max_output_len) if target is not None else None
    d = model.arch.embed_dim
    dts: dict[tuple[int, int], np.ndarray] = {}
    trace, prompt_trace, updates = [], [], []
    checkpoints: dict[int, np.ndarray] = {}
    wanted = set(config.checkpoints)

    for step in range(1, config.iterations + 1):
        total = 0.0
        for n, ps in enumerate(per_image):
            k = len(ps)
            i = rng.randbelow(k)
            p = ps[i]
            prompt_trace.append((n, i))
            view = augment_image(images, n, augment, rng)
            key = (n, i)
            if key not in dts:
                dts[key] = np.zeros((len(p.ids), d))
            x = np.clip(view + delta, 0.0, 1.0)
            labels = fixed if fixed is not None else clean_output_ids(model, view, p)
            value, g_x, g_dt, parts = evaluate_objective(model, x, p, labels, dts[key], sign=sign, engine=engine)
            if monitor is not None:
                monitor({"method": "cross_image", "iteration": step, "image": x, "delta_v": delta,
                         "delta_t": dts[key], "prompt": i, "image_index": n, "value": value, "parts": parts})
            total += parts["lm"]
            delta = pgd_image_step(delta, g_x, config.alpha1, eps)
            if is_text_update(step, config, k):
                dts[key] = pgd_text_step(dts[key], g_dt, config.alpha2, config.text_delta_range)
                updates.append(step)
        trace.append((step, total / len(images)))
        if step in wanted:
            checkpoints[step] = delta.copy()

    return AttackResult(
        method="cross_image",
        perturbation=Perturbation(delta, eps, dts),
        loss_trace=trace,
        checkpoints=checkpoints,
        config=config,
        elapsed=time.perf_counter() - t0,
        prompt_trace=prompt_trace,
        text_updates=updates,
        extra={"augment": augment.mode, "init": init},
    )
