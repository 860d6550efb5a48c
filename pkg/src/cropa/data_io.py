"""Images, prompts, vocabulary, configuration, manifests and reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, build_config, parse_lines, split_override
from .evaluation import AsrReport, EvalProtocol, make_protocol
from .model import PAD, TASKS, UNK, TokenSeq
from .rng import Rng, fnv1a_64

IMAGE_SIDE = 32
REPORT_COLUMNS = ("method", "target_text", "task", "asr", "successes", "total", "checkpoint_iter", "seed")
_EDGE_PUNCT = ".,;:!?\"'()[]{}"


# -- vocabulary and prompts ------------------------------------------------------------


class Vocab:
    def __init__(self, words: Mapping[str, int]):
        self.ids = dict(words)
        if self.ids.get("<pad>") != PAD or self.ids.get("<unk>") != UNK:
            raise ValueError("vocabulary must map <pad> to 0 and <unk> to 1")
        if len(set(self.ids.values())) != len(self.ids):
            raise ValueError("vocabulary ids are not unique")
        self.words = {i: w for w, i in self.ids.items()}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def max_id(self) -> int:
        return max(self.ids.values())

    def tokenize(self, text: str) -> tuple[int, ...]:
        """Lower-case, split on whitespace, drop edge punctuation; unknown words become 1."""
        out = []
        for raw in text.lower().split():
            word = raw.strip(_EDGE_PUNCT)
            if word:
                out.append(self.ids.get(word, UNK))
        return tuple(out)

    def detokenize(self, ids: Iterable[int]) -> str:
        return " ".join(self.words.get(int(i), "<unk>") for i in ids if i != PAD)


def load_vocab(path: str | os.PathLike | None = None) -> Vocab:
    text = _read_text(path, "vocab.txt")
    words = {}
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            word, idx = line.split("\t")
            words[word] = int(idx)
        except ValueError:
            raise ValueError(f"vocab line {n}: expected 'word<TAB>id', got {line!r}") from None
    return Vocab(words)


def load_prompt_set(
    path: str | os.PathLike | None = None, vocab: Vocab | None = None, max_len: int = 8
) -> dict[str, list[TokenSeq]]:
    """Prompts grouped by task tag, in file order."""
    vocab = vocab or load_vocab()
    text = _read_text(path, "prompts.tsv")
    out: dict[str, list[TokenSeq]] = {t: [] for t in TASKS}
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        if "\t" not in line:
            raise ValueError(f"prompt line {n}: expected 'task_tag<TAB>prompt'")
        tag, prompt = line.split("\t", 1)
        if tag not in TASKS:
            raise ValueError(f"prompt line {n}: unknown task tag {tag!r}")
        ids = vocab.tokenize(prompt)
        if not 1 <= len(ids) <= max_len:
            raise ValueError(f"prompt line {n}: {len(ids)} tokens, expected 1..{max_len}")
        out[tag].append(TokenSeq(ids, tag))
    return out


def _read_text(path, packaged: str) -> str:
    if path:
        return Path(path).read_text(encoding="utf-8")
    return resources.files("cropa").joinpath("data", packaged).read_text(encoding="utf-8")


# -- targets ------------------------------------------------------------------------------


@dataclass(frozen=True)
class TargetSpec:
    text: str
    ids: tuple[int, ...]
    image_path: str = ""

    def __post_init__(self):
        if not 1 <= len(self.ids) <= 4:
            raise ValueError(f"target {self.text!r} tokenizes to {len(self.ids)} tokens, expected 1..4")

    @property
    def tokens(self) -> TokenSeq:
        return TokenSeq(self.ids)


def make_target(text: str, vocab: Vocab | None = None, image_path: str = "") -> TargetSpec:
    vocab = vocab or load_vocab()
    return TargetSpec(text, vocab.tokenize(text), image_path)


def target_image_provider(target: TargetSpec, side: int = IMAGE_SIDE) -> np.ndarray:
    """Explicit image when a path is given, otherwise a procedural image keyed on the text hash."""
    if target.image_path:
        return load_image(target.image_path, side)
    return synth_image(fnv1a_64(target.text), side)


# -- images -------------------------------------------------------------------------------


class PpmError(ValueError):
    def __init__(self, reason: str, message: str):
        super().__init__(f"{reason}: {message}")
        self.reason = reason


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PpmError("header", "file ends inside the header")
        tokens.append(data[start:pos])
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PpmError("header", "missing whitespace before pixel data")
    return tokens, pos + 1


def decode_ppm(data: bytes) -> np.ndarray:
    """Binary PPM (P6, maxval <= 255) to a float array of shape (3, H, W) in [0, 1]."""
    if data[:2] != b"P6":
        raise PpmError("magic", f"expected P6, got {data[:2]!r}")
    tokens, start = _header_tokens(data[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise PpmError("header", f"non-integer header fields {tokens!r}") from None
    if width < 1 or height < 1:
        raise PpmError("header", f"bad dimensions {width}x{height}")
    if not 1 <= maxval <= 255:
        raise PpmError("maxval", f"only 8-bit samples are supported, got maxval {maxval}")
    payload = data[2 + start :]
    need = width * height * 3
    if len(payload) < need:
        raise PpmError("truncated", f"expected {need} pixel bytes, found {len(payload)}")
    px = np.frombuffer(payload[:need], dtype=np.uint8).reshape(height, width, 3)
    return px.transpose(2, 0, 1).astype(np.float64) / maxval


def encode_ppm(image: np.ndarray) -> bytes:
    """(3, H, W) float image in [0, 1] to 8-bit P6 bytes."""
    c, h, w = image.shape
    px = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)
    return f"P6\n{w} {h}\n255\n".encode() + px.tobytes()


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int | None = None) -> np.ndarray:
    """Resize a (C, H, W) array with half-pixel centres and clamped edges."""
    out_w = out_h if out_w is None else out_w
    _, h, w = image.shape

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis(h, out_h)
    x0, x1, wx = axis(w, out_w)
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy)[:, None] + bot * wy[:, None]


def load_image(path: str | os.PathLike, side: int = IMAGE_SIDE) -> np.ndarray:
    img = decode_ppm(Path(path).read_bytes())
    if img.shape[1:] != (side, side):
        img = bilinear_resize(img, side, side)
    return np.clip(img, 0.0, 1.0)


def synth_image(seed: int, side: int = IMAGE_SIDE, channels: int = 3) -> np.ndarray:
    """Per channel: 0.5 + 0.5 sin(a i / side + b j / side + phi), parameters drawn a, b, phi."""
    rng = Rng(seed)
    i = np.arange(side, dtype=np.float64)[:, None]
    j = np.arange(side, dtype=np.float64)[None, :]
    out = np.empty((channels, side, side))
    for c in range(channels):
        a = rng.uniform(-2 * math.pi, 2 * math.pi)
        b = rng.uniform(-2 * math.pi, 2 * math.pi)
        phi = rng.uniform(0.0, 2 * math.pi)
        out[c] = 0.5 + 0.5 * np.sin(a * i / side + b * j / side + phi)
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class ImageRecord:
    name: str
    data: np.ndarray
    digest: str


def image_digest(image: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(image, dtype="<f8").tobytes()).hexdigest()


def resolve_images(spec: str, image_seed: int = 1000, side: int = IMAGE_SIDE) -> list[ImageRecord]:
    """``synth:N`` (seeds image_seed .. image_seed+N-1) or a comma-separated list of PPM paths."""
    spec = spec.strip()
    out = []
    if spec.startswith("synth:"):
        try:
            n = int(spec[6:])
        except ValueError:
            raise ConfigError("images", f"bad synthetic image count in {spec!r}") from None
        if n < 1:
            raise ConfigError("images", "need at least one image")
        for k in range(n):
            img = synth_image(image_seed + k, side)
            out.append(ImageRecord(f"synth-{image_seed + k}", img, image_digest(img)))
        return out
    paths = [p for p in spec.split(",") if p.strip()]
    if not paths:
        raise ConfigError("images", "empty image list")
    for p in paths:
        img = load_image(p.strip(), side)
        out.append(ImageRecord(p.strip(), img, image_digest(img)))
    return out


# -- configuration ------------------------------------------------------------------------


def load_config(path: str | os.PathLike | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Flat key = value file, then ``key=value`` overrides, validated together."""
    values = parse_lines(Path(path).read_text(encoding="utf-8"), str(path)) if path else {}
    for item in overrides:
        key, value = split_override(item)
        values[key] = value
    return build_config(values)


def protocol_from_config(cfg: RunConfig, vocab: Vocab | None = None) -> EvalProtocol:
    prompts = load_prompt_set(cfg.protocol.prompts_file or None, vocab)
    p = cfg.protocol
    return make_protocol(prompts, p.train_prompts, p.heldout_per_task, p.eval_mode, p.eval_repeats)


# -- manifests and reports ----------------------------------------------------------------


def atomic_write(path: str | os.PathLike, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def file_digest(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def utc_now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


@dataclass
class RunManifest:
    config: dict
    master_seed: int
    model_seeds: list[int]
    input_digests: dict[str, str]
    artifact_version: str = __version__
    started: str = ""
    finished: str = ""
    outputs: dict[str, str] = field(default_factory=dict)

    def run_config(self) -> RunConfig:
        return build_config(self.config)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        raw = json.loads(text)
        known = {k: raw[k] for k in cls.__dataclass_fields__ if k in raw}
        missing = {"config", "master_seed", "model_seeds", "input_digests"} - set(known)
        if missing:
            raise ValueError(f"manifest lacks {sorted(missing)}")
        return cls(**known)


def make_manifest(cfg: RunConfig, images: Sequence[ImageRecord], model_seeds: Sequence[int]) -> RunManifest:
    return RunManifest(
        config=cfg.to_flat(),
        master_seed=cfg.attack.seed,
        model_seeds=[int(s) for s in model_seeds],
        input_digests={r.name: r.digest for r in images},
        started=utc_now(),
    )


def write_manifest(manifest: RunManifest, path: str | os.PathLike) -> Path:
    return atomic_write(path, manifest.to_json().encode())


def read_manifest(path: str | os.PathLike) -> RunManifest:
    return RunManifest.from_json(Path(path).read_text(encoding="utf-8"))


def report_rows(report: AsrReport) -> list[list[str]]:
    rows = []
    per_task = report.per_task
    for t in report.tasks:
        rows.append([t, per_task[t], report.successes[t], report.totals[t]])
    rows.append(["overall", report.overall, sum(report.successes.values()), sum(report.totals.values())])
    return [
        [report.method, report.target_text, t, f"{asr:.4f}", str(s), str(n), str(report.checkpoint_iter), str(report.seed)]
        for t, asr, s, n in rows
    ]


def format_report(reports: AsrReport | Sequence[AsrReport]) -> bytes:
    reports = [reports] if isinstance(reports, AsrReport) else list(reports)
    if not reports:
        raise ValueError("no reports to write")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerows(report_rows(r))
    return buf.getvalue().encode()


def read_report(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def write_report(
    report: AsrReport | Sequence[AsrReport],
    manifest: RunManifest | None,
    out_dir: str | os.PathLike,
    name: str = "report",
) -> dict[str, Path]:
    """CSV report plus the manifest (JSON) beside it; both written atomically."""
    out_dir = Path(out_dir)
    paths = {"csv": atomic_write(out_dir / f"{name}.csv", format_report(report))}
    if manifest is not None:
        manifest.outputs[f"{name}.csv"] = file_digest(paths["csv"])
        paths["manifest"] = write_manifest(manifest, out_dir / f"{name}.manifest.json")
    return paths
