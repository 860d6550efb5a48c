"""Attack-success-rate scoring over held-out prompts, images, and models."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import fastpath
from .model import TASKS, TokenSeq, ToyVlm, strip_output

EVAL_MODES = ("targeted", "untargeted")


@dataclass(frozen=True)
class EvalProtocol:
    mode: str
    train: Mapping[str, tuple[TokenSeq, ...]]
    heldout: Mapping[str, tuple[TokenSeq, ...]]
    tasks: tuple[str, ...] = TASKS
    repeats: int = 1

    def __post_init__(self):
        if self.mode not in EVAL_MODES:
            raise ValueError(f"unknown evaluation mode {self.mode!r}")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        object.__setattr__(self, "train", {t: tuple(self.train.get(t, ())) for t in self.tasks})
        object.__setattr__(self, "heldout", {t: tuple(self.heldout.get(t, ())) for t in self.tasks})
        seen = {p.ids for ps in self.train.values() for p in ps}
        for task, prompts in self.heldout.items():
            for p in prompts:
                if p.task_tag != task:
                    raise ValueError(f"held-out prompt {p.ids} is tagged {p.task_tag!r}, filed under {task!r}")
                if p.ids in seen:
                    raise ValueError(f"prompt {p.ids} is in both the training and held-out sets")

    def train_prompts(self) -> list[TokenSeq]:
        """Training prompts interleaved across tasks (round-robin order)."""
        out = []
        depth = max((len(v) for v in self.train.values()), default=0)
        for r in range(depth):
            for t in self.tasks:
                if r < len(self.train[t]):
                    out.append(self.train[t][r])
        return out


def make_protocol(
    prompt_set: Mapping[str, Sequence[TokenSeq]],
    train_total: int,
    heldout_per_task: int,
    mode: str = "targeted",
    repeats: int = 1,
    tasks: Sequence[str] = TASKS,
) -> EvalProtocol:
    """Training prompts are taken round-robin from the front of each task list;
    held-out prompts are the last ``heldout_per_task`` of each task."""
    tasks = tuple(tasks)
    for t in tasks:
        if not prompt_set.get(t):
            raise ValueError(f"empty prompt set for task {t!r}")
    train = {t: [] for t in tasks}
    taken = 0
    r = 0
    while taken < train_total:
        progressed = False
        for t in tasks:
            if taken < train_total and r < len(prompt_set[t]):
                train[t].append(prompt_set[t][r])
                taken += 1
                progressed = True
        if not progressed:
            raise ValueError(f"only {taken} prompts available for {train_total} training slots")
        r += 1
    heldout = {}
    for t in tasks:
        ps = list(prompt_set[t])
        if len(train[t]) + heldout_per_task > len(ps):
            raise ValueError(f"task {t!r} has {len(ps)} prompts, needs {len(train[t]) + heldout_per_task}")
        heldout[t] = ps[len(ps) - heldout_per_task :]
    return EvalProtocol(mode, train, heldout, tasks, repeats)


@dataclass(frozen=True)
class AsrReport:
    successes: Mapping[str, int]
    totals: Mapping[str, int]
    method: str = ""
    target_text: str = ""
    seed: int = 0
    checkpoint_iter: int = 0
    config_hash: str = ""
    meta: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.totals:
            raise ValueError("report has no tasks")
        if set(self.successes) != set(self.totals):
            raise ValueError("successes and totals cover different tasks")
        for t, n in self.totals.items():
            if n <= 0 or not 0 <= self.successes[t] <= n:
                raise ValueError(f"inconsistent counts for task {t!r}")

    @property
    def tasks(self) -> tuple[str, ...]:
        return tuple(self.totals)

    @property
    def per_task(self) -> dict[str, float]:
        return {t: self.successes[t] / self.totals[t] for t in self.totals}

    @property
    def overall(self) -> float:
        vals = list(self.per_task.values())
        return float(sum(vals) / len(vals))


def _prepare(model: ToyVlm, image: np.ndarray, delta_v) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != model.arch.image_shape:
        raise ValueError(f"image shape {image.shape} does not match model input {model.arch.image_shape}")
    if delta_v is None:
        return image
    return np.clip(image + np.asarray(delta_v, dtype=np.float64), 0.0, 1.0)


def outputs(model: ToyVlm, image: np.ndarray, prompts: Sequence[TokenSeq]) -> list[tuple[int, ...]]:
    """Pad-stripped greedy outputs (no text perturbation is ever applied here)."""
    pooled = fastpath.encode(model, image).pooled
    return [strip_output(fastpath.greedy_ids(model, pooled, p)) for p in prompts]


def _target_ids(target) -> tuple[int, ...]:
    ids = target.ids if isinstance(target, TokenSeq) else tuple(target)
    return strip_output(ids)


def count_targeted(model, image, delta_v, prompts, target) -> tuple[int, int]:
    if not prompts:
        raise ValueError("empty prompt set")
    want = _target_ids(target)
    got = outputs(model, _prepare(model, image, delta_v), prompts)
    return sum(g == want for g in got), len(prompts)


def count_untargeted(model, image, delta_v, prompts) -> tuple[int, int]:
    if not prompts:
        raise ValueError("empty prompt set")
    clean = outputs(model, _prepare(model, image, None), prompts)
    adv = outputs(model, _prepare(model, image, delta_v), prompts)
    return sum(a != c for a, c in zip(adv, clean)), len(prompts)


def asr_targeted(model: ToyVlm, image, delta_v, prompts: Sequence[TokenSeq], target) -> float:
    s, n = count_targeted(model, image, delta_v, prompts, target)
    return s / n


def asr_untargeted(model: ToyVlm, image, delta_v, prompts: Sequence[TokenSeq]) -> float:
    s, n = count_untargeted(model, image, delta_v, prompts)
    return s / n


def result_delta(result, checkpoint: int | None = None) -> np.ndarray:
    """The image perturbation of an attack result (or a bare array) at a checkpoint."""
    if isinstance(result, np.ndarray):
        return result
    if checkpoint is None:
        return result.perturbation.delta_v
    if checkpoint not in result.checkpoints:
        raise KeyError(f"no checkpoint at iteration {checkpoint}")
    return result.checkpoints[checkpoint]


def _score(model, pairs, protocol: EvalProtocol, target) -> tuple[dict, dict]:
    if protocol.mode == "targeted" and target is None:
        raise ValueError("targeted evaluation needs a target")
    succ = {t: 0 for t in protocol.tasks}
    tot = {t: 0 for t in protocol.tasks}
    for image, delta in pairs:
        for t in protocol.tasks:
            prompts = protocol.heldout[t]
            for _ in range(protocol.repeats):
                if protocol.mode == "targeted":
                    s, n = count_targeted(model, image, delta, prompts, target)
                else:
                    s, n = count_untargeted(model, image, delta, prompts)
                succ[t] += s
                tot[t] += n
    return succ, tot


def evaluate_run(
    model: ToyVlm,
    images: Sequence[np.ndarray],
    results: Sequence,
    protocol: EvalProtocol,
    target=None,
    checkpoint: int | None = None,
    **meta,
) -> AsrReport:
    """Per-task ASR over held-out prompts, pooled across images."""
    if len(results) != len(images):
        raise ValueError(f"{len(images)} images but {len(results)} attack results")
    if any(r is None for r in results):
        raise ValueError("missing attack result for an image")
    pairs = [(img, result_delta(r, checkpoint)) for img, r in zip(images, results)]
    succ, tot = _score(model, pairs, protocol, target)
    return AsrReport(succ, tot, checkpoint_iter=checkpoint or 0, **meta)


def cross_model_transfer(
    source_model: ToyVlm,
    target_model: ToyVlm,
    images: Sequence[np.ndarray],
    results: Sequence,
    protocol: EvalProtocol,
    target=None,
    checkpoint: int | None = None,
    **meta,
) -> AsrReport:
    """Score perturbations crafted on ``source_model`` against ``target_model``."""
    if source_model.arch.image_shape != target_model.arch.image_shape:
        raise ValueError(
            f"image shapes differ: {source_model.arch.image_shape} vs {target_model.arch.image_shape}"
        )
    return evaluate_run(target_model, images, results, protocol, target, checkpoint, **meta)


def cross_image_eval(
    model: ToyVlm,
    universal_delta: np.ndarray,
    unseen_images: Sequence[np.ndarray],
    protocol: EvalProtocol,
    train_images: Sequence[np.ndarray] = (),
    target=None,
    **meta,
) -> AsrReport:
    """Apply one perturbation to images the attack never saw."""
    train_keys = {np.asarray(x, dtype=np.float64).tobytes() for x in train_images}
    for i, img in enumerate(unseen_images):
        if np.asarray(img, dtype=np.float64).tobytes() in train_keys:
            raise ValueError(f"test image {i} also appears in the training set")
    pairs = [(img, universal_delta) for img in unseen_images]
    succ, tot = _score(model, pairs, protocol, target)
    return AsrReport(succ, tot, **meta)
