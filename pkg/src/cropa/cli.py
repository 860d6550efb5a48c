"""Command-line entry point.

Exit codes: 0 success, 1 check or trend failure, 2 config error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import attacks as A
from . import bench as B
from . import data_io as D
from . import gradcheck as G
from .augment import attack_cross_image
from .config import METHODS, RunConfig, build_config, split_override
from .config import ConfigError
from .evaluation import cross_image_eval, evaluate_run
from .model import build_model

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
MANIFEST = "manifest.json"
CROSS_IMAGE_CHECKPOINTS = (1500, 1600, 1700)


class RunError(RuntimeError):
    pass


def _flag_overrides(args) -> list[str]:
    pairs = [
        ("method", "method"),
        ("target_text", "target_text"),
        ("images", "images"),
        ("schedule_mode", "schedule_mode"),
        ("duap_sign_mode", "duap_sign_mode"),
        ("augment", "augment"),
    ]
    out = list(getattr(args, "set", None) or [])
    for attr, key in pairs:
        value = getattr(args, attr, None)
        if value is not None:
            out.append(f"{key}={value}")
    return out


def _config_from_args(args) -> RunConfig:
    return D.load_config(args.config, _flag_overrides(args))


def _manifest_config(manifest: D.RunManifest, overrides: Sequence[str]) -> RunConfig:
    values = dict(manifest.config)
    for item in overrides:
        key, value = split_override(item)
        values[key] = value
    return build_config(values)


def weights_name(seed: int) -> str:
    return f"model_s{seed}.weights"


def _checkpoint_name(index: int | None, iteration: int) -> str:
    who = "universal" if index is None else f"img{index:03d}"
    return f"{who}_it{iteration:05d}.ckpt"


# -- attack -------------------------------------------------------------------------------


def _attack_one(job) -> A.AttackResult:
    flat, image, index, engine = job
    cfg = build_config(flat)
    model = build_model(cfg.model_seed)
    vocab = D.load_vocab()
    proto = D.protocol_from_config(cfg, vocab)
    train = proto.train_prompts()
    spec = D.make_target(cfg.target_text, vocab, cfg.target_image)
    target = spec.tokens if cfg.protocol.eval_mode == "targeted" else None
    a = cfg.attack
    kw = {"image_index": index, "engine": engine}
    if cfg.method == "single_p":
        return A.attack_single_p(model, image, train[0], target, a, **kw)
    if cfg.method == "multi_p":
        return A.attack_multi_p(model, image, train, target, a, **kw)
    if cfg.method == "cropa":
        return A.attack_cropa(model, image, train, target, a, **kw)
    timg = D.target_image_provider(spec)
    if cfg.method == "cropa_init":
        return A.attack_cropa_init(model, image, timg, train, target, a, **kw)
    if cfg.method == "cropa_duap":
        return A.attack_cropa_duap(model, image, timg, train, target, a, **kw)
    raise ConfigError("method", f"{cfg.method} is not a per-image method")


def _run_attacks(cfg: RunConfig, images: list[D.ImageRecord], jobs: int, engine: str) -> list[A.AttackResult]:
    if cfg.method == "cross_image":
        model = build_model(cfg.model_seed)
        vocab = D.load_vocab()
        train = D.protocol_from_config(cfg, vocab).train_prompts()
        spec = D.make_target(cfg.target_text, vocab, cfg.target_image)
        target = spec.tokens if cfg.protocol.eval_mode == "targeted" else None
        a = replace(cfg.attack, checkpoints=tuple(cfg.attack.checkpoints) + CROSS_IMAGE_CHECKPOINTS)
        return [attack_cross_image(model, [r.data for r in images], train, target, a, cfg.augment, engine=engine)]
    work = [(cfg.to_flat(), r.data, n, engine) for n, r in enumerate(images)]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_attack_one, work))
    return [_attack_one(w) for w in work]


def _write_trace(path: Path, results: Sequence[A.AttackResult]) -> None:
    rows = ["image,iteration,loss"]
    for n, r in enumerate(results):
        rows += [f"{n},{it},{loss!r}" for it, loss in r.loss_trace]
    D.atomic_write(path, ("\n".join(rows) + "\n").encode())


def _target_tokens(cfg: RunConfig, mode: str):
    return D.make_target(cfg.target_text, None, cfg.target_image).tokens if mode == "targeted" else None


def _evaluate(cfg: RunConfig, model, deltas: list[np.ndarray], iteration: int, config_hash: str):
    """Report for one set of perturbations; cross-image runs are scored on the unseen images."""
    proto = D.protocol_from_config(cfg)
    target = _target_tokens(cfg, proto.mode)
    meta = {"method": cfg.method, "target_text": cfg.target_text if target else "",
            "seed": cfg.attack.seed, "config_hash": config_hash}
    train = [r.data for r in D.resolve_images(cfg.images, cfg.image_seed)]
    if cfg.method == "cross_image":
        test = [r.data for r in D.resolve_images(cfg.test_images, cfg.test_image_seed)]
        return cross_image_eval(model, deltas[0], test, proto, train_images=train, target=target,
                                checkpoint_iter=iteration, **meta), proto
    report = evaluate_run(model, train, deltas, proto, target, **meta)
    return replace(report, checkpoint_iter=iteration), proto


def cmd_attack(args) -> int:
    if args.manifest:
        manifest_in = D.read_manifest(args.manifest)
        cfg = _manifest_config(manifest_in, _flag_overrides(args))
    else:
        manifest_in = None
        cfg = _config_from_args(args)
    out = Path(args.out)
    images = D.resolve_images(cfg.images, cfg.image_seed)
    if manifest_in is not None:
        digests = {r.name: r.digest for r in images}
        if digests != manifest_in.input_digests:
            raise RunError("input images do not match the manifest digests")
    manifest = D.make_manifest(cfg, images, [cfg.model_seed])
    results = _run_attacks(cfg, images, args.jobs, args.engine)
    digest = cfg.digest()
    K = cfg.attack.iterations
    for n, r in enumerate(results):
        index = None if cfg.method == "cross_image" else n
        snaps = dict(r.checkpoints)
        snaps[K] = r.delta_v
        for it in sorted(snaps):
            A.write_checkpoint(out / "checkpoints" / _checkpoint_name(index, it), snaps[it], digest, it)
    _write_trace(out / "trace.csv", results)
    D.atomic_write(out / weights_name(cfg.model_seed), build_model(cfg.model_seed).export_weights())
    report, proto = _evaluate(cfg, build_model(cfg.model_seed), [r.delta_v for r in results], K, digest.hex())
    manifest.finished = D.utc_now()
    D.write_report(report, manifest, out, "attack")
    D.write_manifest(manifest, out / MANIFEST)
    print(f"{cfg.method}: {len(results)} run(s), overall {proto.mode} ASR {report.overall:.4f} -> {out}")
    return EXIT_OK


# -- eval / transfer ----------------------------------------------------------------------


def _load_run(args):
    out = Path(args.out)
    path = out / MANIFEST
    if not path.exists():
        raise RunError(f"no {MANIFEST} in {out}")
    manifest = D.read_manifest(path)
    overrides = list(args.set or [])
    if getattr(args, "mode", None):
        overrides.append(f"eval_mode={args.mode}")
    cfg = _manifest_config(manifest, overrides)
    it = args.checkpoint_iter if args.checkpoint_iter is not None else cfg.attack.iterations
    digest = build_config(manifest.config).digest()
    if cfg.method == "cross_image":
        names = [_checkpoint_name(None, it)]
    else:
        names = [_checkpoint_name(n, it) for n in range(len(manifest.input_digests))]
    deltas = []
    for name in names:
        p = out / "checkpoints" / name
        if not p.exists():
            raise RunError(f"missing checkpoint {p}")
        delta, h, stored_it = A.read_checkpoint(p)
        if h != digest or stored_it != it:
            raise RunError(f"checkpoint {p} does not belong to this run")
        deltas.append(delta)
    return out, manifest, cfg, it, deltas, digest.hex()


def cmd_eval(args) -> int:
    out, manifest, cfg, it, deltas, digest = _load_run(args)
    report, proto = _evaluate(cfg, build_model(cfg.model_seed), deltas, it, digest)
    paths = D.write_report(report, manifest, out, f"eval_{proto.mode}_it{it:05d}")
    print(f"eval {proto.mode} @ {it}: overall {report.overall:.4f} -> {paths['csv']}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    if not args.mode:
        args.mode = "untargeted"
    out, manifest, cfg, it, deltas, digest = _load_run(args)
    seed = cfg.transfer_seed if args.target_seed is None else args.target_seed
    source, target_model = build_model(cfg.model_seed), build_model(seed)
    if source.arch.image_shape != target_model.arch.image_shape:
        raise RunError("source and target models take different image shapes")
    report, proto = _evaluate(cfg, target_model, deltas, it, digest)
    manifest.model_seeds = [cfg.model_seed, seed]
    paths = D.write_report(report, manifest, out, f"transfer_s{seed}_{proto.mode}_it{it:05d}")
    print(f"transfer {cfg.model_seed}->{seed} {proto.mode} @ {it}: overall {report.overall:.4f} -> {paths['csv']}")
    return EXIT_OK


# -- gradcheck / bench / report -----------------------------------------------------------


def cmd_gradcheck(args) -> int:
    seeds = range(args.seeds if args.seeds is not None else 10)
    rows = G.run_suite(seeds, components=args.components, fault=args.inject_fault)
    summary = G.summarize(rows)
    ok = True
    print(f"{'loss':<14}{'delta_v':>12}{'delta_t':>12}  status")
    for kind in G.LOSS_KINDS:
        ev = summary.get((kind, "delta_v"))
        et = summary.get((kind, "delta_t"))
        worst = max(e for e in (ev, et) if e is not None)
        passed = worst < G.TOLERANCE
        ok &= passed
        fmt = lambda e: f"{e:12.3e}" if e is not None else f"{'-':>12}"
        print(f"{kind:<14}{fmt(ev)}{fmt(et)}  {'pass' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def _bench_settings(args) -> B.BenchSettings:
    settings = B.BenchSettings(jobs=args.jobs)
    if args.seeds is not None:
        if args.seeds < 1:
            raise ConfigError("seeds", "must be >= 1")
        settings = replace(settings, seeds=tuple(range(args.seeds)), paired_seeds=tuple(range(max(args.seeds, 1) * 2)))
    kinds = {f.name: f.type for f in fields(B.BenchSettings)}
    for item in args.set or []:
        key, value = split_override(item)
        if key not in kinds or key in ("seeds", "paired_seeds", "jobs"):
            raise ConfigError(key, "unknown bench key")
        try:
            if kinds[key] == "int":
                parsed = int(value)
            elif kinds[key].startswith("tuple"):
                parsed = tuple(int(v) for v in value.split(",") if v)
            else:
                parsed = value
        except ValueError:
            raise ConfigError(key, f"bad value {value!r}") from None
        settings = replace(settings, **{key: parsed})
    if settings.iterations not in settings.checkpoints:
        settings = replace(settings, checkpoints=tuple(sorted(set(settings.checkpoints) | {settings.iterations})))
    return settings


def cmd_bench(args) -> int:
    settings = _bench_settings(args)
    smoke = len(settings.seeds) == 1
    claims = B.run_claims(settings)
    init = B.run_init_effect(settings)
    duap = B.run_duap_effect(settings)
    cross = B.run_cross_image(settings)

    print(f"{'method':<12}{'overall':>9}  " + "  ".join(f"{t[:10]:>10}" for t in claims.reports["cropa"][0].tasks)
          + f"  {'heldout_loss':>12}")
    order = sorted(B.CLAIM_METHODS, key=lambda m: -claims.mean_asr(m))
    for m in order:
        per = [np.mean([r.per_task[t] for r in claims.reports[m]]) for t in claims.reports[m][0].tasks]
        print(f"{m:<12}{claims.mean_asr(m):9.4f}  " + "  ".join(f"{v:10.4f}" for v in per)
              + f"  {claims.heldout_loss[m]:12.5f}")
    for mode, reps in cross.items():
        print(f"{'xi_' + mode:<12}{np.mean([r.overall for r in reps]):9.4f}  (untargeted, unseen images)")
    init_frac = np.mean([r["ok"] for r in init])
    duap_frac = np.mean([r["ok"] for r in duap])
    checks = [
        ("claim1_ordering", claims.ordering_ok()),
        ("claim3_checkpoint", claims.checkpoint_ok()),
        ("init_mse_drop", all(r["mse1"] < r["mse0"] for r in init)),
        ("init_reach", init_frac >= 0.7),
        ("duap_drop", duap_frac >= 0.8),
        ("duap_lambda0", all(r["lambda0_identical"] for r in duap)),
        ("cross_image", B.cross_image_ok(cross)),
    ]
    if args.out:
        reports = [r for m in B.CLAIM_METHODS for r in claims.reports[m]] + [r for v in cross.values() for r in v]
        D.write_report(reports, None, args.out, "bench")
    if smoke:
        print("smoke mode (one seed): trend criteria not gated")
        return EXIT_OK
    for name, ok in checks:
        print(f"{name:<20}{'pass' if ok else 'FAIL'}")
    return EXIT_OK if all(ok for _, ok in checks) else EXIT_FAIL


def cmd_report(args) -> int:
    out = Path(args.out)
    files = sorted(p for p in out.glob("*.csv") if p.name not in ("summary.csv", "trace.csv"))
    rows = []
    for p in files:
        for row in D.read_report(p):
            if list(row) == list(D.REPORT_COLUMNS):
                rows.append({"source": p.stem, **row})
    if not rows:
        raise RunError(f"no report CSVs in {out}")
    cols = ["source", *D.REPORT_COLUMNS]
    buf = [",".join(cols)] + [",".join(r[c] for c in cols) for r in rows]
    D.atomic_write(out / "summary.csv", ("\n".join(buf) + "\n").encode())
    width = {c: max(len(c), *(len(r[c]) for r in rows)) for c in cols}
    print("  ".join(c.ljust(width[c]) for c in cols))
    for r in rows:
        print("  ".join(r[c].ljust(width[c]) for c in cols))
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cropa", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--out", required=out_required, help="run directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    a = sub.add_parser("attack", help="run an attack and write checkpoints, trace, report and manifest")
    common(a)
    a.add_argument("--method", choices=METHODS)
    a.add_argument("--target-text")
    a.add_argument("--images", help="synth:N or comma-separated PPM paths")
    a.add_argument("--schedule-mode", choices=("appendix_window", "algorithm1_modulo"))
    a.add_argument("--duap-sign-mode", choices=("align", "literal_eq12"))
    a.add_argument("--augment", choices=("none", "scmix", "cutmix"))
    a.add_argument("--manifest", help="rerun exactly the run recorded in this manifest")
    a.add_argument("--engine", choices=A.ENGINES, default="fast")

    for name in ("eval", "transfer"):
        e = sub.add_parser(name, help=f"{name} checkpoints of a finished run")
        common(e)
        e.add_argument("--checkpoint-iter", type=int)
        e.add_argument("--mode", choices=("targeted", "untargeted"))
        if name == "transfer":
            e.add_argument("--target-seed", type=int, help="seed of the model the perturbation is moved to")

    g = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    g.add_argument("--seeds", type=int)
    g.add_argument("--components", type=int, default=64, help="image entries probed per check")
    g.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)

    b = sub.add_parser("bench", help="seeded trend benchmark")
    common(b, out_required=False)
    b.add_argument("--seeds", type=int, help="number of master seeds (1 = smoke run)")

    r = sub.add_parser("report", help="collect the report CSVs of a run directory")
    r.add_argument("--out", required=True)
    return p


COMMANDS = {
    "attack": cmd_attack,
    "eval": cmd_eval,
    "transfer": cmd_transfer,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunError, OSError, ValueError, KeyError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
