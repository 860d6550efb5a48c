"""Sign-gradient PGD attacks: single prompt, multi prompt, cross-prompt min-max,
encoder-anchored initialization, and value-vector guidance.

All attacks share one loop (:func:`_pgd_loop`).  The image perturbation
descends the objective ``J``; per-prompt text perturbations ascend it.  For a
targeted attack ``J`` is the target-sequence cross-entropy, for an untargeted
one it is the negated cross-entropy against the clean greedy output.
"""

from __future__ import annotations

import hashlib
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import fastpath
from . import tensor as T
from .config import AttackConfig
from .data_io import atomic_write
from .losses import duap_loss, target_values
from .model import (
    TokenSeq,
    ToyVlm,
    check_image,
    encode_prompt,
    head_logits,
    lm_loss,
    target_labels,
    vision_encode,
)
from .rng import Rng
from .tensor import Tensor

ENGINES = ("fast", "tape")
CHECKPOINT_MAGIC = b"CRPADV01"
_HEADER = struct.Struct("<8s32sQ")

Monitor = Callable[[dict], None]


@dataclass
class Perturbation:
    delta_v: np.ndarray
    epsilon: float
    # prompt index -> text perturbation ((image, prompt) pairs for universal runs)
    delta_t: dict = field(default_factory=dict)


@dataclass
class AttackResult:
    method: str
    perturbation: Perturbation
    loss_trace: list[tuple[int, float]]
    checkpoints: dict[int, np.ndarray]
    config: AttackConfig
    elapsed: float = 0.0
    prompt_trace: list[int] = field(default_factory=list)
    text_updates: list[int] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def delta_v(self) -> np.ndarray:
        return self.perturbation.delta_v

    def losses(self) -> np.ndarray:
        return np.array([v for _, v in self.loss_trace])


# -- steps --------------------------------------------------------------------------------


def project_linf(delta: np.ndarray, epsilon: float) -> np.ndarray:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return np.clip(delta, -epsilon, epsilon)


def pgd_image_step(delta_v: np.ndarray, g_v: np.ndarray, alpha1: float, epsilon: float) -> np.ndarray:
    """Descent: delta - alpha1 * sign(g), projected (sign(0) = 0)."""
    return project_linf(delta_v - alpha1 * np.sign(g_v), epsilon)


def pgd_text_step(delta_t: np.ndarray, g_t: np.ndarray, alpha2: float, bounds: tuple[float, float]) -> np.ndarray:
    """Ascent: delta + alpha2 * sign(g), clamped into ``bounds``."""
    lo, hi = bounds
    return np.clip(delta_t + alpha2 * np.sign(g_t), lo, hi)


def text_step_size(config: AttackConfig, k: int) -> int:
    return max(config.text_update_window // k, 1)


def is_text_update(step: int, config: AttackConfig, k: int) -> bool:
    if config.schedule_mode == "appendix_window":
        return step <= config.text_update_window and step % text_step_size(config, k) == 0
    return step % config.text_update_interval == 0


def text_schedule(config: AttackConfig, k: int, iterations: int | None = None) -> list[int]:
    """Iterations (1-based) at which a text update fires."""
    K = config.iterations if iterations is None else iterations
    return [s for s in range(1, K + 1) if is_text_update(s, config, k)]


def image_rng(seed: int, image_index: int) -> Rng:
    return Rng(seed ^ image_index)


# -- objective evaluation -----------------------------------------------------------------


def _as_reference_dict(model: ToyVlm, values: np.ndarray) -> dict[tuple[int, int], Tensor]:
    return {(l, h): Tensor(values[l, h]) for l in model.arch.value_layers for h in range(model.arch.heads_per_layer)}


def evaluate_objective(
    model: ToyVlm,
    x: np.ndarray,
    prompt: TokenSeq,
    labels: Sequence[int],
    delta_t: np.ndarray | None,
    reference: np.ndarray | None = None,
    duap_coef: float = 0.0,
    sign: float = 1.0,
    engine: str = "fast",
):
    """``(J, dJ/dx, dJ/d delta_t, parts)`` at the already-clipped image ``x``."""
    if engine == "fast":
        return fastpath.objective(model, x, prompt, labels, delta_t, reference, duap_coef, sign)
    if engine != "tape":
        raise ValueError(f"unknown engine {engine!r}")
    parts: dict[str, float] = {}
    ref = None if reference is None else _as_reference_dict(model, reference)

    def fn(image, delta_t=None):
        vis = vision_encode(model, image)
        lg = head_logits(model, vis.pooled, encode_prompt(model, prompt, delta_t))
        lm = lm_loss(lg, labels) if len(labels) < lg.shape[0] else T.cross_entropy(lg, list(labels))
        parts["lm"] = float(lm.data)
        total = T.scale(lm, sign)
        if ref is not None:
            du = duap_loss(vis.values, ref, "align")
            parts["duap"] = float(du.data)
            if duap_coef != 0.0:
                total = T.add(total, T.scale(du, duap_coef))
        return total

    inputs = {"image": Tensor(x, requires_grad=True)}
    if delta_t is not None:
        inputs["delta_t"] = Tensor(delta_t, requires_grad=True)
    value, grads = T.value_and_grad(fn, inputs)
    g_dt = grads.get("delta_t", np.zeros((len(prompt.ids), model.arch.embed_dim)))
    return value, grads["image"], g_dt, parts


def clean_output_ids(model: ToyVlm, image: np.ndarray, prompt: TokenSeq) -> tuple[int, ...]:
    """Raw greedy ids of the clean image: the labels of the untargeted objective."""
    return fastpath.greedy_ids(model, fastpath.encode(model, image).pooled, prompt)


# -- the shared loop ----------------------------------------------------------------------


@dataclass
class _LoopSpec:
    method: str
    text_updates: bool
    text_sign: float = 1.0
    reference: np.ndarray | None = None
    duap_coef: float = 0.0


def _pgd_loop(
    model: ToyVlm,
    image: np.ndarray,
    prompts: Sequence[TokenSeq],
    target: TokenSeq | None,
    config: AttackConfig,
    spec: _LoopSpec,
    delta0: np.ndarray | None = None,
    image_index: int = 0,
    monitor: Monitor | None = None,
    engine: str = "fast",
) -> AttackResult:
    t0 = time.perf_counter()
    image = np.asarray(image, dtype=np.float64)
    check_image(model, image)
    used = list(prompts)[: config.prompt_count]
    if not used:
        raise ValueError("need at least one prompt")
    k = len(used)
    eps = config.epsilon
    rng = image_rng(config.seed, image_index)
    delta = np.zeros_like(image) if delta0 is None else project_linf(np.array(delta0, dtype=np.float64), eps)
    sign = 1.0 if target is not None else -1.0
    fixed_labels = target_labels(target, model.arch.max_output_len) if target is not None else None
    d = model.arch.embed_dim
    dts: dict[int, np.ndarray] = {}
    trace, prompt_trace, updates = [], [], []
    duap_trace: list[float] = []
    checkpoints: dict[int, np.ndarray] = {}
    wanted = set(config.checkpoints)

    for step in range(1, config.iterations + 1):
        i = rng.randbelow(k)
        p = used[i]
        prompt_trace.append(i)
        dt = None
        if spec.text_updates:
            if i not in dts:
                dts[i] = np.zeros((len(p.ids), d))
            dt = dts[i]
        x = np.clip(image + delta, 0.0, 1.0)
        labels = fixed_labels if fixed_labels is not None else clean_output_ids(model, image, p)
        value, g_x, g_dt, parts = evaluate_objective(
            model, x, p, labels, dt, spec.reference, spec.duap_coef, sign, engine
        )
        if monitor is not None:
            monitor({"method": spec.method, "iteration": step, "image": x, "delta_v": delta,
                     "delta_t": dt, "prompt": i, "value": value, "parts": parts})
        trace.append((step, parts["lm"]))
        if "duap" in parts:
            duap_trace.append(parts["duap"])
        delta = pgd_image_step(delta, g_x, config.alpha1, eps)
        if spec.text_updates and is_text_update(step, config, k):
            dts[i] = pgd_text_step(dt, spec.text_sign * g_dt, config.alpha2, config.text_delta_range)
            updates.append(step)
        if step in wanted:
            checkpoints[step] = delta.copy()

    extra = {"duap_trace": duap_trace} if spec.reference is not None else {}
    return AttackResult(
        method=spec.method,
        perturbation=Perturbation(delta, eps, dts),
        loss_trace=trace,
        checkpoints=checkpoints,
        config=config,
        elapsed=time.perf_counter() - t0,
        prompt_trace=prompt_trace,
        text_updates=updates,
        extra=extra,
    )


# -- orchestrators ------------------------------------------------------------------------


def attack_multi_p(model, image, prompts, target, config: AttackConfig, **kw) -> AttackResult:
    """One uniformly sampled prompt per iteration; no text perturbation."""
    return _pgd_loop(model, image, prompts, target, config, _LoopSpec("multi_p", False), **kw)


def attack_single_p(model, image, prompt: TokenSeq, target, config: AttackConfig, **kw) -> AttackResult:
    return _pgd_loop(model, image, [prompt], target, config, _LoopSpec("single_p", False), **kw)


def attack_cropa(model, image, prompts, target, config: AttackConfig, delta0=None, **kw) -> AttackResult:
    """Image descent every iteration, text ascent on the configured schedule."""
    return _pgd_loop(model, image, prompts, target, config, _LoopSpec("cropa", True), delta0=delta0, **kw)


def init_perturbation(
    model: ToyVlm,
    image: np.ndarray,
    target_image: np.ndarray,
    config: AttackConfig,
    init_iters: int | None = None,
    init_budget: float | None = None,
    monitor: Monitor | None = None,
) -> np.ndarray:
    """Sign-PGD on the pooled-feature distance to the target image.

    Each step is projected onto the ``init_budget`` ball; the result is finally
    projected onto the attack's epsilon ball.
    """
    iters = config.init_iters if init_iters is None else init_iters
    budget = config.init_budget if init_budget is None else init_budget
    image = np.asarray(image, dtype=np.float64)
    check_image(model, image)
    goal = fastpath.encode(model, np.asarray(target_image, dtype=np.float64)).pooled
    delta = np.zeros_like(image)
    for step in range(1, iters + 1):
        x = np.clip(image + delta, 0.0, 1.0)
        value, g = fastpath.mse_objective(model, x, goal)
        if monitor is not None:
            monitor({"method": "init", "iteration": step, "image": x, "delta_v": delta, "value": value})
        delta = project_linf(delta - config.alpha1 * np.sign(g), budget)
    return project_linf(delta, config.epsilon)


def attack_cropa_init(model, image, target_image, prompts, target, config: AttackConfig, **kw) -> AttackResult:
    monitor = kw.get("monitor")
    delta0 = init_perturbation(model, image, target_image, config, monitor=monitor)
    res = attack_cropa(model, image, prompts, target, config, delta0=delta0, **kw)
    res.method = "cropa_init"
    res.extra["init_delta"] = delta0
    return res


def reference_values(model: ToyVlm, target_image: np.ndarray) -> np.ndarray:
    """Value vectors of the target image, every layer: (L, H, P, head_dim)."""
    return fastpath.encode(model, np.asarray(target_image, dtype=np.float64)).values


def attack_cropa_duap(
    model, image, target_image, prompts, target, config: AttackConfig, **kw
) -> AttackResult:
    """CroPA with the value-vector alignment term added to the image objective.

    The target image's value vectors are extracted once and held fixed.
    """
    ref = reference_values(model, target_image)
    coef = config.lam if config.duap_sign_mode == "align" else -config.lam
    text_sign = 1.0 if config.duap_text_step == "ascent" else -1.0
    spec = _LoopSpec("cropa_duap", True, text_sign, ref, coef)
    return _pgd_loop(model, image, prompts, target, config, spec, **kw)


def duap_value(model: ToyVlm, image: np.ndarray, delta_v: np.ndarray, target_image: np.ndarray) -> float:
    """Alignment term at ``clip(image + delta_v)`` against the target image."""
    x = np.clip(np.asarray(image) + delta_v, 0.0, 1.0)
    ref = reference_values(model, target_image)
    return fastpath.duap_terms(fastpath.encode(model, x).values, ref, model.arch.value_layers)[0]


def tape_duap_value(model: ToyVlm, image: np.ndarray, delta_v: np.ndarray, target_image: np.ndarray) -> float:
    x = np.clip(np.asarray(image) + delta_v, 0.0, 1.0)
    return float(duap_loss(vision_encode(model, Tensor(x)).values, target_values(model, target_image)).data)


# -- checkpoints --------------------------------------------------------------------------


def write_checkpoint(path, delta_v: np.ndarray, config_hash: bytes, iteration: int) -> Path:
    """Header (magic, sha256 config hash, iteration), then little-endian float64 delta_v."""
    if len(config_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    body = np.ascontiguousarray(delta_v, dtype="<f8").tobytes()
    return atomic_write(path, _HEADER.pack(CHECKPOINT_MAGIC, config_hash, iteration) + body)


def read_checkpoint(path, shape: tuple[int, ...] = (3, 32, 32)) -> tuple[np.ndarray, bytes, int]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: too short for a checkpoint header")
    magic, digest, iteration = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
    need = int(np.prod(shape)) * 8
    if len(data) - _HEADER.size != need:
        raise ValueError(f"{path}: expected {need} payload bytes, found {len(data) - _HEADER.size}")
    delta = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(shape).astype(np.float64)
    return delta, digest, iteration


def config_hash(text: str | bytes) -> bytes:
    return hashlib.sha256(text.encode() if isinstance(text, str) else text).digest()
