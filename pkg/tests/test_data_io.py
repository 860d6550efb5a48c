import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cropa import data_io as D
from cropa.config import ConfigError, RunConfig
from cropa.evaluation import AsrReport
from cropa.model import TASKS
from cropa.rng import fnv1a_64
from oracle import forward as O


def ppm(w, h, pixels, maxval=255, header=None):
    head = header if header is not None else f"P6\n{w} {h}\n{maxval}\n".encode()
    return head + bytes(pixels)


def test_black_and_white(tmp_path):
    p = tmp_path / "b.ppm"
    p.write_bytes(ppm(5, 3, [0] * 45))
    assert not D.load_image(p).any() and D.load_image(p).shape == (3, 32, 32)
    p.write_bytes(ppm(40, 40, [255] * 4800))
    assert np.array_equal(D.load_image(p), np.ones((3, 32, 32)))


def test_two_by_two_bilinear_oracle(tmp_path):
    px = [0, 10, 20, 60, 70, 80, 120, 130, 140, 180, 190, 200]
    p = tmp_path / "q.ppm"
    p.write_bytes(ppm(2, 2, px))
    img = D.load_image(p)
    src = np.array(px, dtype=float).reshape(2, 2, 3).transpose(2, 0, 1) / 255
    for c in range(3):
        for i in range(32):
            for j in range(32):
                y = min(max((i + 0.5) * 2 / 32 - 0.5, 0.0), 1.0)
                x = min(max((j + 0.5) * 2 / 32 - 0.5, 0.0), 1.0)
                ref = (src[c, 0, 0] * (1 - y) * (1 - x) + src[c, 0, 1] * (1 - y) * x
                       + src[c, 1, 0] * y * (1 - x) + src[c, 1, 1] * y * x)
                assert abs(img[c, i, j] - ref) < 1e-12


def test_header_comments_and_maxval():
    data = b"P6 # a comment\n2 1\n# another\n15\n" + bytes([15, 0, 15, 0, 15, 0])
    img = D.decode_ppm(data)
    assert img.shape == (3, 1, 2)
    assert img[0, 0, 0] == 1.0 and img[1, 0, 0] == 0.0


@pytest.mark.parametrize(
    "data,reason",
    [
        (b"P3\n1 1\n255\n" + bytes(3), "magic"),
        (b"P6\n1 x\n255\n" + bytes(3), "header"),
        (b"P6\n1", "header"),
        (b"P6\n1 1\n65535\n" + bytes(6), "maxval"),
        (b"P6\n2 2\n255\n" + bytes(5), "truncated"),
    ],
)
def test_ppm_errors(data, reason):
    with pytest.raises(D.PpmError) as err:
        D.decode_ppm(data)
    assert err.value.reason == reason


@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_ppm_round_trip(w, h, data):
    px = data.draw(st.lists(st.integers(0, 255), min_size=w * h * 3, max_size=w * h * 3))
    img = D.decode_ppm(ppm(w, h, px))
    assert D.encode_ppm(img) == ppm(w, h, px)


def test_synth_image():
    a, b = D.synth_image(42), D.synth_image(42)
    assert np.array_equal(a, b) and a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, O.synth(42))
    # corner pixel is 0.5 + 0.5 sin(phi_c); phi_c is the third draw per channel
    from cropa.rng import Rng

    r = Rng(42)
    for c in range(3):
        r.random(), r.random()
        phi = r.uniform(0.0, 2 * math.pi)
        assert a[c, 0, 0] == pytest.approx(0.5 + 0.5 * math.sin(phi), abs=1e-15)


def test_target_images(tmp_path):
    t = D.make_target("unknown")
    assert np.array_equal(D.target_image_provider(t), D.target_image_provider(D.make_target("unknown")))
    assert fnv1a_64("unknown") != fnv1a_64("bomb")
    assert not np.array_equal(D.target_image_provider(t), D.target_image_provider(D.make_target("bomb")))
    assert np.array_equal(D.target_image_provider(t), D.synth_image(fnv1a_64("unknown")))
    p = tmp_path / "t.ppm"
    p.write_bytes(ppm(1, 1, [255, 0, 255]))
    explicit = D.target_image_provider(D.make_target("unknown", image_path=str(p)))
    assert np.array_equal(explicit[1], np.zeros((32, 32)))


def test_vocab_and_prompts(prompts):
    vocab = D.load_vocab()
    assert vocab.ids["<pad>"] == 0 and vocab.ids["<unk>"] == 1 and vocab.max_id < 64
    assert vocab.tokenize("Unknown.") == (vocab.ids["unknown"],)
    assert vocab.tokenize("zebra") == (1,)
    assert set(prompts) == set(TASKS)
    assert all(len(ps) == 16 and all(1 <= len(p) <= 8 for p in ps) for ps in prompts.values())
    assert len({p.ids for ps in prompts.values() for p in ps}) == 64


def test_target_length_bounds():
    assert D.make_target("I am sorry").ids == (54, 55, 56)
    with pytest.raises(ValueError):
        D.make_target("")
    with pytest.raises(ValueError):
        D.make_target("i am not sure very")


def test_prompt_file_errors(tmp_path):
    p = tmp_path / "p.tsv"
    p.write_text("poetry\twhat is this\n")
    with pytest.raises(ValueError):
        D.load_prompt_set(p)
    p.write_text("captioning\t" + "a " * 9 + "\n")
    with pytest.raises(ValueError):
        D.load_prompt_set(p)


def test_resolve_images(tmp_path):
    recs = D.resolve_images("synth:3", image_seed=10)
    assert [r.name for r in recs] == ["synth-10", "synth-11", "synth-12"]
    assert recs[0].digest == D.image_digest(D.synth_image(10))
    p = tmp_path / "a.ppm"
    p.write_bytes(ppm(1, 1, [1, 2, 3]))
    assert D.resolve_images(str(p))[0].name == str(p)
    with pytest.raises(ConfigError):
        D.resolve_images("synth:zero")
    with pytest.raises(OSError):
        D.resolve_images(str(tmp_path / "missing.ppm"))


def report():
    succ = {t: s for t, s in zip(TASKS, (37, 38, 36, 37))}
    return AsrReport(succ, {t: 48 for t in TASKS}, "cropa", "unknown", 42, 1700)


def test_report_formatting(tmp_path):
    r = report()
    assert f"{r.overall:.4f}" == "0.7708"
    paths = D.write_report(r, None, tmp_path)
    rows = D.read_report(paths["csv"])
    assert list(rows[0]) == list(D.REPORT_COLUMNS)
    assert rows[-1]["task"] == "overall" and rows[-1]["asr"] == "0.7708"
    first = paths["csv"].read_bytes()
    D.write_report(r, None, tmp_path)
    assert paths["csv"].read_bytes() == first
    with pytest.raises(ValueError):
        D.format_report([])
    assert [p.name for p in tmp_path.iterdir()] == ["report.csv"]


def test_manifest_round_trip(tmp_path):
    cfg = D.load_config(None, ["epsilon=8/255", "method=cropa_duap", "checkpoints=10,20"])
    m = D.make_manifest(cfg, D.resolve_images("synth:2"), [42])
    D.write_report(report(), m, tmp_path)
    back = D.read_manifest(tmp_path / "report.manifest.json")
    assert back.run_config() == cfg
    assert back.outputs["report.csv"] == D.file_digest(tmp_path / "report.csv")
    raw = json.loads((tmp_path / "report.manifest.json").read_text())
    for key in ("config", "master_seed", "model_seeds", "input_digests", "artifact_version", "started", "finished"):
        assert key in raw
    with pytest.raises(ValueError):
        D.RunManifest.from_json("{}")


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# sample\niterations = 50\nlam = 2\naugment = scmix\n")
    cfg = D.load_config(p, ["lam=3"])
    assert cfg.attack.iterations == 50 and cfg.attack.lam == 3.0 and cfg.augment.mode == "scmix"
    assert D.load_config(p).attack.lam == 2.0


def test_protocol_from_config():
    cfg = D.load_config(None, ["train_prompts=4", "heldout_per_task=2", "eval_mode=untargeted"])
    proto = D.protocol_from_config(cfg)
    assert proto.mode == "untargeted" and len(proto.train_prompts()) == 4
    assert all(len(v) == 2 for v in proto.heldout.values())
