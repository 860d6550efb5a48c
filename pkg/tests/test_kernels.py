import os
import subprocess
import sys

import numpy as np
import pytest

from cropa import attacks as A
from cropa import fastpath, kernels
from cropa.data_io import make_target, synth_image, target_image_provider

BACKENDS = sorted(kernels.backends())


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    impl = kernels.backends()[request.param]
    monkeypatch.setattr(kernels, "encoder_forward", impl.encoder_forward)
    monkeypatch.setattr(kernels, "encoder_backward", impl.encoder_backward)
    return request.param


def test_compiled_backend_is_built():
    assert "compiled" in BACKENDS
    assert kernels.BACKEND == "compiled"


@pytest.mark.parametrize("labels_kind", ["target", "clean"])
def test_fast_objective_matches_tape(model, flat_prompts, backend, labels_kind):
    timg = target_image_provider(make_target("unknown"))
    ref = fastpath.encode(model, timg).values
    for seed in range(3):
        x = synth_image(300 + seed)
        p = flat_prompts[seed * 7]
        dt = np.full((len(p.ids), 32), 0.03 * (seed + 1))
        labels = [51, 0] if labels_kind == "target" else A.clean_output_ids(model, x, p)
        sign = 1.0 if labels_kind == "target" else -1.0
        fast = A.evaluate_objective(model, x, p, labels, dt, ref, 5.0, sign, engine="fast")
        tape = A.evaluate_objective(model, x, p, labels, dt, ref, 5.0, sign, engine="tape")
        assert abs(fast[0] - tape[0]) < 1e-10
        assert np.max(np.abs(fast[1] - tape[1])) < 1e-10
        assert np.max(np.abs(fast[2] - tape[2])) < 1e-10
        assert abs(fast[3]["duap"] - tape[3]["duap"]) < 1e-10


def test_backends_agree(model):
    impls = kernels.backends()
    x = synth_image(11)
    patches = np.ascontiguousarray(fastpath.patchify_array(x, model.arch))
    args = (model.patch_proj, model.w_q, model.w_k, model.w_v, model.w_o)
    caches = {n: impl.encoder_forward(patches, *args) for n, impl in impls.items()}
    g_out = np.full((16, 32), 0.01)
    g_val = np.full((4, 2, 16, 16), 0.02)
    grads = {n: impls[n].encoder_backward(caches[n], *args, g_out, g_val) for n in impls}
    a, b = grads["python"], grads["compiled"]
    assert np.max(np.abs(a - b)) < 1e-12
    assert np.max(np.abs(caches["python"][0] - caches["compiled"][0])) < 1e-12


def test_mse_objective_matches_finite_differences(model, backend):
    x = 0.1 + 0.8 * synth_image(5)
    goal = fastpath.encode(model, synth_image(6)).pooled
    _, g = fastpath.mse_objective(model, x, goal)
    for i in (0, 500, 3071):
        e = np.zeros(x.size); e[i] = 1e-5
        e = e.reshape(x.shape)
        fd = (fastpath.mse_objective(model, x + e, goal)[0] - fastpath.mse_objective(model, x - e, goal)[0]) / 2e-5
        assert abs(fd - g.reshape(-1)[i]) <= 1e-6 * max(1.0, abs(fd))


def test_environment_forces_python_fallback():
    code = "from cropa import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, CROPA_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_backend_benchmark_runs(tmp_path):
    import csv
    import subprocess
    import sys
    from pathlib import Path

    script = Path(__file__).parents[1] / "benchmarks" / "bench_kernels.py"
    out = tmp_path / "k.csv"
    subprocess.run([sys.executable, str(script), "--repeats", "1", "--images", "2", "--csv", str(out)], check=True,
                   capture_output=True)
    rows = {r["backend"]: r for r in csv.DictReader(out.open())}
    assert {"tape", "python"} <= set(rows)
    assert sum(r["selected"] == "true" for r in rows.values()) == 1
