"""Finite-difference checks of every loss against the tape gradients."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from . import losses as L
from . import tensor as T
from .data_io import load_prompt_set, make_target, synth_image, target_image_provider
from .model import ToyVlm, build_model, vision_encode
from .rng import Rng
from .tensor import Graph, Tensor

LOSS_KINDS = ("targeted", "untargeted", "vision_mse", "duap_align", "duap_deviate", "recropa")
TOLERANCE = 1e-3


@dataclass(frozen=True)
class CheckRow:
    loss: str
    wrt: str
    seed: int
    error: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


def _interior_point(model: ToyVlm, seed: int, epsilon: float = 16 / 255):
    """A clean image in [0.1, 0.9] and a perturbation small enough that no pixel clips."""
    rng = Rng(seed)
    x = 0.1 + 0.8 * synth_image(10_000 + seed)
    dv = np.array([rng.uniform(-epsilon, epsilon) for _ in range(x.size)]).reshape(x.shape)
    return x, dv, rng


def loss_graph(kind: str, model: ToyVlm, seed: int, prompt_index: int = 0):
    """``(graph, inputs)`` for one loss kind at a seeded interior point."""
    x, dv, rng = _interior_point(model, seed)
    prompts = load_prompt_set()
    flat = [p for ps in prompts.values() for p in ps]
    prompt = flat[(seed + prompt_index) % len(flat)]
    target = make_target("unknown").tokens
    target_image = target_image_provider(make_target("unknown"))
    dt = np.array([rng.uniform(-0.2, 0.2) for _ in range(len(prompt.ids) * model.arch.embed_dim)])
    dt = dt.reshape(len(prompt.ids), model.arch.embed_dim)
    base = Tensor(x)
    inputs = {"delta_v": Tensor(dv, requires_grad=True)}
    if kind in ("targeted", "untargeted", "recropa"):
        inputs["delta_t"] = Tensor(dt, requires_grad=True)

    if kind == "targeted":
        fn = lambda delta_v, delta_t: L.targeted_loss(model, T.add(base, delta_v), prompt, target, delta_t)
    elif kind == "untargeted":
        fn = lambda delta_v, delta_t: L.untargeted_loss(model, T.add(base, delta_v), prompt, x, delta_t)
    elif kind == "vision_mse":
        fn = lambda delta_v: L.vision_mse(model, T.add(base, delta_v), target_image)
    elif kind == "duap_align":
        ref = L.target_values(model, target_image)
        fn = lambda delta_v: L.duap_loss(vision_encode(model, T.add(base, delta_v)).values, ref, "align")
    elif kind == "duap_deviate":
        ref = L.target_values(model, x)
        fn = lambda delta_v: L.duap_loss(vision_encode(model, T.add(base, delta_v)).values, ref, "deviate")
    elif kind == "recropa":
        spec = L.LossSpec("recropa", 5.0)
        ref = L.target_values(model, target_image)
        fn = lambda delta_v, delta_t: L.recropa_loss(
            model, T.add(base, delta_v), prompt, target, spec=spec, delta_t=delta_t, reference_values=ref
        )
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    return Graph(fn), inputs


def check_loss(kind: str, model: ToyVlm, seed: int, components: int | None = 64, step: float = 1e-4) -> list[CheckRow]:
    """Max relative error per differentiated input; ``components`` samples the image entries."""
    graph, inputs = loss_graph(kind, model, seed)
    rows = []
    for wrt in inputs:
        size = inputs[wrt].data.size
        idx = None
        if wrt == "delta_v" and components is not None and components < size:
            pick = Rng(seed ^ 0xC0FFEE)
            idx = sorted({pick.randbelow(size) for _ in range(components)})
        rows.append(CheckRow(kind, wrt, seed, T.grad_check(graph, inputs, wrt, step, idx)))
    return rows


@contextlib.contextmanager
def broken_tanh(factor: float = 1.1) -> Iterator[None]:
    """Temporarily give tanh a wrong vector-Jacobian product (fault injection)."""
    original = T.tanh

    def bad_tanh(a):
        y = np.tanh(T._as_tensor(a).data)
        out = T._emit("tanh", y, [T._as_tensor(a)], lambda g: (g * (1.0 - y * y) * factor,))
        return out

    T.tanh = bad_tanh
    try:
        yield
    finally:
        T.tanh = original


def run_suite(
    seeds: Sequence[int] = range(3),
    kinds: Sequence[str] = LOSS_KINDS,
    components: int | None = 64,
    model_seed: int = 42,
    fault: bool = False,
    progress: Callable[[CheckRow], None] | None = None,
) -> list[CheckRow]:
    model = build_model(model_seed)
    ctx = broken_tanh() if fault else contextlib.nullcontext()
    rows = []
    with ctx:
        for kind in kinds:
            for s in seeds:
                for row in check_loss(kind, model, s, components):
                    rows.append(row)
                    if progress:
                        progress(row)
    return rows


def summarize(rows: Sequence[CheckRow]) -> dict[tuple[str, str], float]:
    out: dict[tuple[str, str], float] = {}
    for r in rows:
        key = (r.loss, r.wrt)
        out[key] = max(out.get(key, 0.0), r.error)
    return out
