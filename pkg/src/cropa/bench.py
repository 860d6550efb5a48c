"""Seeded desk-scale trend benchmark.

Each master seed fixes the benchmark images (image seeds offset by
``100 * master_seed``) and the per-image sampling streams.  Every runner
returns plain numbers so the CLI and the acceptance tests can gate on them.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import attacks as A
from .augment import attack_cross_image
from .config import AttackConfig, AugmentConfig
from .data_io import load_prompt_set, make_target, synth_image, target_image_provider
from .evaluation import AsrReport, EvalProtocol, cross_image_eval, evaluate_run, make_protocol
from .fastpath import ce_and_grad, duap_terms, encode, head, mse_objective
from .model import build_model, target_labels

CLAIM_METHODS = ("single_p", "multi_p", "cropa")
NOISE = 0.02
CROSS_IMAGE_NOISE = 0.05


@dataclass(frozen=True)
class BenchSettings:
    n_images: int = 16
    train_prompts: int = 8
    heldout_per_task: int = 8
    target_text: str = "unknown"
    iterations: int = 400
    checkpoints: tuple[int, ...] = (100, 200, 300, 400)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    paired_seeds: tuple[int, ...] = tuple(range(10))
    model_seed: int = 42
    image_seed: int = 1000
    cross_train_images: int = 8
    cross_test_images: int = 8
    jobs: int = 1

    def attack_config(self, seed: int, **kw) -> AttackConfig:
        base = AttackConfig(iterations=self.iterations, checkpoints=self.checkpoints, seed=seed,
                            prompt_count=self.train_prompts)
        return replace(base, **kw)

    def images(self, seed: int, n: int | None = None, offset: int = 0) -> list[np.ndarray]:
        n = self.n_images if n is None else n
        start = self.image_seed + 100 * seed + offset
        return [synth_image(start + i) for i in range(n)]


def protocol(settings: BenchSettings, mode: str = "targeted") -> EvalProtocol:
    return make_protocol(load_prompt_set(), settings.train_prompts, settings.heldout_per_task, mode)


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def heldout_target_loss(model, images, deltas, protocol: EvalProtocol, target) -> float:
    """Mean target cross-entropy over images and held-out prompts (no text perturbation)."""
    labels = target_labels(target, model.arch.max_output_len)
    vals = []
    for img, d in zip(images, deltas):
        pooled = encode(model, np.clip(img + d, 0.0, 1.0)).pooled
        for ps in protocol.heldout.values():
            vals += [ce_and_grad(head(model, pooled, p, None)[0], labels)[0] for p in ps]
    return float(np.mean(vals))


# -- claim 1 and claim 3: method ordering and checkpoint trend --------------------------------


def _claim_worker(args) -> dict:
    settings, seed, method = args
    model = build_model(settings.model_seed)
    proto = protocol(settings)
    train = proto.train_prompts()
    target = make_target(settings.target_text).tokens
    cfg = settings.attack_config(seed)
    images = settings.images(seed)
    results = []
    for j, img in enumerate(images):
        if method == "single_p":
            results.append(A.attack_single_p(model, img, train[0], target, cfg, image_index=j))
        elif method == "multi_p":
            results.append(A.attack_multi_p(model, img, train, target, cfg, image_index=j))
        else:
            results.append(A.attack_cropa(model, img, train, target, cfg, image_index=j))
    reports = {c: evaluate_run(model, images, results, proto, target, checkpoint=c, method=method,
                               target_text=settings.target_text, seed=seed)
               for c in settings.checkpoints}
    return {"seed": seed, "method": method, "reports": reports,
            "final_loss": float(np.mean([r.loss_trace[-1][1] for r in results])),
            "heldout_loss": heldout_target_loss(model, images, [r.delta_v for r in results], proto, target)}


@dataclass
class ClaimResult:
    reports: dict[str, list[AsrReport]] = field(default_factory=dict)  # method -> per seed, final checkpoint
    early: list[AsrReport] = field(default_factory=list)  # cropa at the first checkpoint
    final_loss: dict[str, float] = field(default_factory=dict)
    heldout_loss: dict[str, float] = field(default_factory=dict)
    elapsed: float = 0.0

    def mean_asr(self, method: str) -> float:
        return float(np.mean([r.overall for r in self.reports[method]]))

    def ordering_ok(self) -> bool:
        s, m, c = (self.mean_asr(k) for k in CLAIM_METHODS)
        return m >= s and c - m >= -NOISE

    def checkpoint_ok(self) -> bool:
        late = self.mean_asr("cropa")
        early = float(np.mean([r.overall for r in self.early]))
        return late >= early - NOISE


def run_claims(settings: BenchSettings = BenchSettings()) -> ClaimResult:
    t0 = time.perf_counter()
    jobs = [(settings, s, m) for m in CLAIM_METHODS for s in settings.seeds]
    out = ClaimResult()
    first, last = settings.checkpoints[0], settings.checkpoints[-1]
    losses: dict[str, list[float]] = {}
    heldout: dict[str, list[float]] = {}
    for row in _map(_claim_worker, jobs, settings.jobs):
        out.reports.setdefault(row["method"], []).append(row["reports"][last])
        losses.setdefault(row["method"], []).append(row["final_loss"])
        heldout.setdefault(row["method"], []).append(row["heldout_loss"])
        if row["method"] == "cropa":
            out.early.append(row["reports"][first])
    out.final_loss = {m: float(np.mean(v)) for m, v in losses.items()}
    out.heldout_loss = {m: float(np.mean(v)) for m, v in heldout.items()}
    out.elapsed = time.perf_counter() - t0
    return out


# -- initialization effect --------------------------------------------------------------------


def first_reach(trace: Sequence[tuple[int, float]], level: float) -> int | None:
    for it, v in trace:
        if v <= level:
            return it
    return None


def _init_worker(args) -> dict:
    settings, seed = args
    model = build_model(settings.model_seed)
    train = protocol(settings).train_prompts()
    spec = make_target(settings.target_text)
    timg = target_image_provider(spec)
    img = settings.images(seed, 1)[0]
    cfg = settings.attack_config(seed)
    base = A.attack_cropa(model, img, train, spec.tokens, cfg)
    init = A.attack_cropa_init(model, img, timg, train, spec.tokens, cfg)
    goal = encode(model, timg).pooled
    mse0 = mse_objective(model, img, goal)[0]
    mse1 = mse_objective(model, np.clip(img + init.extra["init_delta"], 0, 1), goal)[0]
    level = base.loss_trace[-1][1]
    reach = first_reach(init.loss_trace, level)
    return {"seed": seed, "mse0": mse0, "mse1": mse1, "zero_final": level, "reach": reach,
            "first_zero": base.loss_trace[0][1], "first_init": init.loss_trace[0][1],
            "ok": reach is not None and reach <= cfg.iterations}


def run_init_effect(settings: BenchSettings = BenchSettings()) -> list[dict]:
    return _map(_init_worker, [(settings, s) for s in settings.paired_seeds], settings.jobs)


# -- value-vector guidance --------------------------------------------------------------------


def _duap_worker(args) -> dict:
    settings, seed = args
    model = build_model(settings.model_seed)
    train = protocol(settings).train_prompts()
    spec = make_target(settings.target_text)
    timg = target_image_provider(spec)
    img = settings.images(seed, 1)[0]
    cfg = settings.attack_config(seed, lam=5.0, duap_sign_mode="align")
    res = A.attack_cropa_duap(model, img, timg, train, spec.tokens, cfg)
    ref = A.reference_values(model, timg)
    layers = model.arch.value_layers
    before = duap_terms(encode(model, img).values, ref, layers)[0]
    after = duap_terms(encode(model, np.clip(img + res.delta_v, 0, 1)).values, ref, layers)[0]
    zero = A.attack_cropa_duap(model, img, timg, train, spec.tokens, replace(cfg, lam=0.0))
    plain = A.attack_cropa(model, img, train, spec.tokens, cfg)
    same = zero.loss_trace == plain.loss_trace and np.array_equal(zero.delta_v, plain.delta_v)
    return {"seed": seed, "before": before, "after": after, "ok": after < before, "lambda0_identical": same}


def run_duap_effect(settings: BenchSettings = BenchSettings()) -> list[dict]:
    return _map(_duap_worker, [(settings, s) for s in settings.paired_seeds], settings.jobs)


# -- cross-image ------------------------------------------------------------------------------


def _cross_worker(args) -> dict:
    settings, seed, mode = args
    model = build_model(settings.model_seed)
    proto_u = protocol(settings, "untargeted")
    train_prompts = proto_u.train_prompts()
    target = make_target(settings.target_text).tokens
    train = settings.images(seed, settings.cross_train_images)
    test = settings.images(seed, settings.cross_test_images, offset=50)
    cfg = settings.attack_config(seed)
    res = attack_cross_image(model, train, train_prompts, target, cfg, AugmentConfig(mode=mode))
    rep = cross_image_eval(model, res.delta_v, test, proto_u, train_images=train,
                           method=f"cross_image_{mode}", target_text="", seed=seed,
                           checkpoint_iter=cfg.iterations)
    return {"seed": seed, "mode": mode, "report": rep}


def run_cross_image(settings: BenchSettings = BenchSettings(), modes=("none", "scmix")) -> dict[str, list[AsrReport]]:
    rows = _map(_cross_worker, [(settings, s, m) for m in modes for s in settings.seeds], settings.jobs)
    out: dict[str, list[AsrReport]] = {m: [] for m in modes}
    for r in rows:
        out[r["mode"]].append(r["report"])
    return out


def cross_image_ok(reports: dict[str, list[AsrReport]]) -> bool:
    base = np.mean([r.overall for r in reports["none"]])
    mixed = np.mean([r.overall for r in reports["scmix"]])
    return bool(mixed >= base - CROSS_IMAGE_NOISE)
