import numpy as np
import pytest

from cprank.cp import CPFactors
from cprank.manifest import LayerRecord, Manifest
from cprank.tensors import ConvLayerSpec, reshape_3way_to_kernel, tensor_from_cp

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(
            f"[{ {True: 'PASS', False: 'FAIL', None: 'SKIP'}[ok] }] {number:2d}. {name}: {detail}")


def random_factors(rng, dims, R, lam=None):
    I, J, K = dims
    if lam is None:
        lam = np.ones(R)
    return CPFactors(rng.standard_normal((I, R)), rng.standard_normal((J, R)),
                     rng.standard_normal((K, R)), np.asarray(lam, dtype=float))


def low_rank_kernel(rng, D, S, T, R, noise=0.0):
    x = tensor_from_cp(random_factors(rng, (D * D, S, T), R))
    if noise:
        e = rng.standard_normal(x.shape)
        x = x + noise * np.linalg.norm(x) / np.linalg.norm(e) * e
    return reshape_3way_to_kernel(x)


def toy_manifest(seed=0):
    """Three small conv layers with planted low-rank weights; the first is two-way."""
    rng = np.random.default_rng(seed)
    specs = [
        (ConvLayerSpec("c1", 3, 3, 12, 1, 1, 1, 10, 10), True, 4),
        (ConvLayerSpec("c2", 3, 12, 16, 2, 2, 1, 10, 10), False, 3),
        (ConvLayerSpec("c3", 3, 16, 8, 1, 1, 1, 5, 5), False, 5),
    ]
    records, arrays = [], {}
    for spec, two_way, R in specs:
        parts = [low_rank_kernel(rng, spec.D, spec.S // spec.group, spec.T // spec.group,
                                 R, noise=0.01) for _ in range(spec.group)]
        k = np.concatenate(parts, axis=3)
        records.append(LayerRecord(spec, f"{spec.id}.cpt", two_way=two_way))
        arrays[spec.id] = k.astype(np.float32).astype(np.float64)
    return Manifest("toy", tuple(records), pending=arrays)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
