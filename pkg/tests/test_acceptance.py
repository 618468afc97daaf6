"""Exit criteria for the package, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
"""

import json
import os
import shlex
import struct
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_RESULTS, low_rank_kernel, random_factors, toy_manifest
from cprank import alexnet
from cprank.blob import BlobFormatError, decode_blob, encode_blob
from cprank.cost import FCSpec, model_stats
from cprank.cp import CPOptions, als_runs, decompose_layer, stack_forward, stack_specs
from cprank.manifest import (
    LayerRecord,
    Manifest,
    ManifestError,
    load_manifest,
    manifest_from_json,
    save_manifest,
)
from cprank.pipeline import HookFailed, PipelineOptions, compress_layer, run_pipeline
from cprank.tensors import ConvLayerSpec, conv_forward, tensor_from_cp
from cprank.vbmf import (
    estimate_noise_evb,
    evb_objective,
    evb_rank,
    evb_threshold,
    layer_rank,
    noise_bracket,
    singular_values,
)

HOOKS = Path(__file__).parent / "hooks"


def record(number, name, ok, detail):
    ACCEPTANCE_RESULTS.append((number, name, bool(ok), detail))
    assert ok, f"criterion {number} ({name}): {detail}"


def planted(rng, L, M, r, sigma2=1.0):
    thr = evb_threshold(sigma2, L, M)
    U, _ = np.linalg.qr(rng.standard_normal((L, r)))
    V, _ = np.linalg.qr(rng.standard_normal((M, r)))
    return (U * 10 * thr) @ V.T + np.sqrt(sigma2) * rng.standard_normal((L, M))


def test_01_alexnet_baseline_accounting():
    t0 = time.perf_counter()
    s = model_stats(alexnet.layer_specs())
    elapsed = time.perf_counter() - t0
    ok = (s.params == 60_954_656 and s.multadds == 724_406_816
          and abs(s.params / 61.0e6 - 1) <= 0.002 and abs(s.multadds / 724e6 - 1) <= 0.002
          and elapsed < 0.1)
    record(1, "AlexNet baseline accounting", ok,
           f"params {s.params:,} multadds {s.multadds:,} ({elapsed * 1e3:.2f} ms)")


def test_02_compressed_accounting():
    t0 = time.perf_counter()
    specs = []
    for spec in alexnet.layer_specs():
        if spec.id in alexnet.TABLE1_RANKS:
            specs += stack_specs(spec, alexnet.TABLE1_RANKS[spec.id],
                                 spec.id in alexnet.TWO_WAY_LAYERS)
        else:
            specs.append(spec)
    base = model_stats(alexnet.layer_specs())
    s = model_stats(specs, base)
    elapsed = time.perf_counter() - t0
    ok = (s.params == 58_934_463 and abs(s.params / 58.9e6 - 1) <= 0.001
          and 2.8 <= s.multadds_ratio <= 3.7 and elapsed < 0.1)
    record(2, "compressed accounting (Table 1 ranks)", ok,
           f"params {s.params:,}, multadds {s.multadds:,}, ratio x{s.multadds_ratio:.3f}")


def test_03_planted_rank_recovery():
    t0 = time.perf_counter()
    hits = {}
    for r in (1, 5, 20):
        hits[r] = sum(evb_rank(planted(np.random.default_rng(1000 * r + s), 100, 200, r)).rank == r
                      for s in range(100))
    elapsed = time.perf_counter() - t0
    ok = all(h >= 95 for h in hits.values()) and elapsed < 60
    record(3, "VBMF planted-rank recovery", ok, f"hits {hits} in {elapsed:.1f} s")


def test_04_noise_variance_estimation():
    t0 = time.perf_counter()
    hits, grid_ok = {}, True
    L, M = 100, 200
    for s2 in (0.25, 1.0, 4.0):
        hits[s2] = 0
        for seed in range(100):
            m = np.sqrt(s2) * np.random.default_rng(seed).standard_normal((L, M))
            g = singular_values(m)
            est = estimate_noise_evb(g, L, M)
            hits[s2] += int(abs(est - s2) <= 0.15 * s2)
            lo, hi = noise_bracket(g, L, M)
            psi = evb_objective(est, g, L, M)
            scan = min(evb_objective(v, g, L, M) for v in np.geomspace(lo, hi, 1000))
            grid_ok &= psi <= scan + 1e-12 * abs(scan)
    elapsed = time.perf_counter() - t0
    ok = all(h >= 90 for h in hits.values()) and grid_ok and elapsed < 60
    record(4, "noise-variance estimation", ok,
           f"hits {hits}, grid-scan oracle {'held' if grid_ok else 'violated'}, "
           f"{elapsed:.1f} s")


def test_05_scale_and_transpose_invariance():
    bad = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        L, M = rng.integers(5, 60, size=2)
        r = int(rng.integers(0, min(L, M) // 2 + 1))
        U = rng.standard_normal((L, r)) * rng.uniform(0.5, 4, r)
        m = U @ rng.standard_normal((r, M)) + rng.standard_normal((L, M))
        base = evb_rank(m).rank
        bad += evb_rank(m.T).rank != base
        bad += sum(evb_rank(c * m).rank != base for c in (1e-3, 1.0, 1e3))
    record(5, "VBMF scale and transpose invariance", bad == 0, f"{bad} mismatches / 200")


def test_06_cp_als_exact_rank5():
    t0 = time.perf_counter()
    x = tensor_from_cp(random_factors(np.random.default_rng(6), (20, 16, 12), 5))
    best, monotone = np.inf, True
    for run in als_runs(x, 5, CPOptions(restarts=20)):
        best = min(best, run.fit_error)
        h = np.array(run.history)
        monotone &= bool(np.all(h[1:] <= h[:-1] * (1 + 1e-10)))
    elapsed = time.perf_counter() - t0
    ok = best < 1e-4 and monotone and elapsed < 60
    record(6, "CP-ALS exact rank-5 fit", ok,
           f"best fit_error {best:.2e}, monotone {monotone}, {elapsed:.1f} s")


def test_07_functional_equivalence():
    rng = np.random.default_rng(7)
    spec = ConvLayerSpec("c", 3, 16, 24, 1, 2, 1, 11, 11)
    k = low_rank_kernel(rng, 3, 16, 24, 8)
    stack, _ = decompose_layer(k, spec, 8, opts=CPOptions(restarts=10))
    worst = 0.0
    for _ in range(10):
        x = rng.standard_normal((16, 11, 11))
        ref = conv_forward(x, spec, k)
        worst = max(worst, np.linalg.norm(stack_forward(x, stack) - ref) / np.linalg.norm(ref))
    record(7, "functional equivalence of decomposition", worst <= 1e-4,
           f"max relative error {worst:.2e}")


def _hook(name, *extra):
    parts = [shlex.quote(sys.executable), shlex.quote(str(HOOKS / name)), "{in}", "{out}"]
    return " ".join(parts + [str(e) for e in extra])


def _dir_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.is_file()}


def test_08_pipeline_semantics(tmp_path):
    opts = PipelineOptions(cp=CPOptions(max_sweeps=100, restarts=2))
    m, _ = run_pipeline(toy_manifest(), opts=opts)
    seq = toy_manifest()
    for lid in ("c1", "c2", "c3"):
        seq, _ = compress_layer(seq, lid, opts=opts.cp)
    save_manifest(m, tmp_path / "p" / "m.json")
    save_manifest(seq, tmp_path / "s" / "m.json")
    same = _dir_bytes(tmp_path / "p") == _dir_bytes(tmp_path / "s")

    _, noop = run_pipeline(toy_manifest(), finetune_hook=_hook("copy_manifest.py"),
                           opts=opts, workdir=tmp_path / "w1")
    _, doubled = run_pipeline(toy_manifest(), finetune_hook=_hook("double_weights.py"),
                              opts=opts, workdir=tmp_path / "w2")
    ranks_noop = [e["rank"] for e in noop.entries]
    ranks_dbl = [e["rank"] for e in doubled.entries]

    try:
        run_pipeline(toy_manifest(), finetune_hook=_hook("fail_at.py", 2), opts=opts,
                     workdir=tmp_path / "w3")
        halted = False
    except HookFailed as e:
        halted = (e.returncode == 17
                  and [x["status"] for x in e.report.entries] == ["ok", "failed"])
    ok = same and ranks_noop == ranks_dbl and halted
    record(8, "pipeline semantics", ok,
           f"sequential-equal {same}, ranks {ranks_noop} vs {ranks_dbl}, "
           f"failing hook halted {halted}")


def _random_manifest(rng, i):
    records, arrays = [], {}
    for j in range(int(rng.integers(1, 4))):
        if rng.random() < 0.25:
            spec = FCSpec(f"fc{j}", int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        else:
            g = int(rng.integers(1, 3))
            D = int(rng.integers(1, 4))
            spec = ConvLayerSpec(f"l{j}", D, g * int(rng.integers(1, 4)),
                                 g * int(rng.integers(1, 4)), g, int(rng.integers(1, 3)),
                                 int(rng.integers(0, 2)), D + int(rng.integers(0, 4)),
                                 D + int(rng.integers(0, 4)))
        two_way = isinstance(spec, ConvLayerSpec) and rng.random() < 0.3
        rec = LayerRecord(spec, f"{spec.id}.cpt", two_way=two_way)
        records.append(rec)
        arrays[spec.id] = rng.standard_normal(rec.blob_shape) * 10 ** rng.uniform(-5, 5)
    return Manifest(f"random-{i}", tuple(records), pending=arrays)


def test_09_serialization_round_trips(tmp_path):
    rng = np.random.default_rng(9)
    blob_ok = manifest_ok = True
    for i in range(1000):
        shape = tuple(int(n) for n in rng.integers(1, 6, size=int(rng.integers(1, 5))))
        a = (rng.standard_normal(shape) * 10 ** rng.uniform(-30, 30)).astype(np.float32)
        buf = encode_blob(a)
        back = decode_blob(buf)
        blob_ok &= back.astype(np.float32).tobytes() == a.tobytes() and encode_blob(back) == buf

        m = _random_manifest(rng, i)
        p1, p2 = tmp_path / f"{i}a" / "m.json", tmp_path / f"{i}b" / "m.json"
        save_manifest(m, p1)
        loaded = load_manifest(p1)
        save_manifest(loaded, p2)
        manifest_ok &= _dir_bytes(p1.parent) == _dir_bytes(p2.parent)

    rejected = []
    good = encode_blob(np.ones((2, 3)))
    zero_dim = bytearray(good)
    struct.pack_into("<I", zero_dim, 8, 0)
    for bad in (b"XXXX" + good[4:], bytes(zero_dim), good[:-2], good[:5]):
        try:
            decode_blob(bad)
            rejected.append(False)
        except BlobFormatError:
            rejected.append(True)
    obj = json.loads(p1.read_text())
    obj["layers"].append(dict(obj["layers"][0]))
    for bad_obj in (obj, {"format_version": 1, "name": "x", "layers": [], "x": 1}):
        try:
            manifest_from_json(bad_obj, p1.parent)
            rejected.append(False)
        except ManifestError:
            rejected.append(True)
    ok = blob_ok and manifest_ok and all(rejected)
    record(9, "serialization round trips", ok,
           f"blob {blob_ok}, manifest {manifest_ok}, malformed rejected "
           f"{sum(rejected)}/{len(rejected)}")


ALEXNET = os.environ.get("CPRANK_ALEXNET_MANIFEST")


def test_10_pretrained_alexnet_ranks():
    if not ALEXNET:
        ACCEPTANCE_RESULTS.append((10, "pretrained AlexNet ranks", None,
                                   "skipped, CPRANK_ALEXNET_MANIFEST not set"))
        pytest.skip("set CPRANK_ALEXNET_MANIFEST to a manifest with pretrained weights")
    m = load_manifest(ALEXNET)
    got = {}
    for lid in alexnet.TABLE1_RANKS:
        rec = m.layer(lid)
        got[lid] = layer_rank(m.weights(lid), rec.spec, rec.two_way).rank
    record(10, "pretrained AlexNet ranks", got == alexnet.TABLE1_RANKS, f"ranks {got}")
