"""Layer-by-layer compression with rank re-estimation after every fine-tune."""

from __future__ import annotations

import logging
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cost import model_stats
from .cp import CPOptions, ConvStack, decompose_layer, svd_two_layer
from .manifest import LayerRecord, Manifest, ManifestError, load_manifest, save_manifest
from .tensors import ConvLayerSpec
from .vbmf import layer_rank

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


class HookFailed(PipelineError):
    """The fine-tune hook exited non-zero or produced an invalid manifest."""

    def __init__(self, message, returncode, manifest, report):
        super().__init__(message)
        self.returncode = returncode
        self.manifest = manifest
        self.report = report


@dataclass(frozen=True)
class PipelineOptions:
    decomposer: str = "als"
    cp: CPOptions = CPOptions()
    skip: frozenset = frozenset()
    timestamp: str | None = None


@dataclass
class PipelineReport:
    entries: list[dict] = field(default_factory=list)
    final: dict | None = None
    status: str = "ok"

    def to_dict(self) -> dict:
        return {"status": self.status, "entries": self.entries, "final": self.final}


def _totals(manifest) -> dict:
    s = model_stats(manifest)
    return {"params": s.params, "multadds": s.multadds}


def _as_f32(a) -> np.ndarray:
    # weights are stored as float32; round now so memory and disk agree
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _stack_records(stack: ConvStack, decomposer: str, timestamp):
    records, arrays = [], {}
    for i, layer in enumerate(stack.layers, start=1):
        prov = {"group_id": stack.source, "source": stack.source, "rank": stack.rank,
                "decomposer": decomposer, "stage": i, "timestamp": timestamp}
        records.append(LayerRecord(layer.spec, f"{layer.spec.id}.cpt", True, False, prov))
        arrays[layer.spec.id] = _as_f32(layer.kernel)
    return records, arrays


def compress_layer(manifest: Manifest, layer_id: str, rank_override: int | None = None,
                   decomposer: str = "als", opts: CPOptions = CPOptions(),
                   timestamp: str | None = None) -> tuple[Manifest, dict]:
    """Replace one conv layer by its low-rank stack.

    The rank comes from ``rank_override`` or, failing that, from VBMF on the
    layer's current weights. Layers flagged ``two_way`` are split by a
    truncated SVD into two stages, all others by CP into three.
    """
    if any(r.provenance and r.provenance.get("source") == layer_id for r in manifest.layers):
        raise PipelineError(f"layer {layer_id!r} is already decomposed")
    rec = manifest.layer(layer_id)
    if rec.kind != "conv":
        raise PipelineError(f"layer {layer_id!r} is not a convolution")
    if rec.decomposed:
        raise PipelineError(f"layer {layer_id!r} is already decomposed")
    spec: ConvLayerSpec = rec.spec
    k = manifest.weights(layer_id)
    entry = {"layer": layer_id, "two_way": rec.two_way, "estimate": None}
    if rank_override is None:
        report = layer_rank(k, spec, rec.two_way)
        rank = report.rank
        entry["estimate"] = report.to_dict()
    else:
        rank = int(rank_override)
    if rank < 1:
        raise PipelineError(f"rank must be >= 1, got {rank}")
    if rec.two_way:
        stack = svd_two_layer(k, rank, spec)
        used = "svd"
        entry["fit_error"] = None
    else:
        stack, factors = decompose_layer(k, spec, rank, decomposer, opts)
        used = decomposer
        entry["fit_error"] = [round(float(f.fit_error), 12) for f in factors]
    records, arrays = _stack_records(stack, used, timestamp)
    out = manifest.replace_layer(layer_id, records, arrays)
    entry.update({
        "rank": rank,
        "decomposer": used,
        "stages": [r.id for r in records],
        "stats_before": _totals(manifest),
        "stats_after": _totals(out),
    })
    return out, entry


def _run_hook(template: str, manifest: Manifest, workdir: Path, step: int):
    in_path = workdir / f"iter{step:02d}" / "in" / "manifest.json"
    out_path = workdir / f"iter{step:02d}" / "out" / "manifest.json"
    save_manifest(manifest, in_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    args = [tok.format(**{"in": str(in_path), "out": str(out_path)})
            for tok in shlex.split(template)]
    log.info("fine-tune hook: %s", " ".join(args))
    proc = subprocess.run(args)
    return proc.returncode, out_path


def run_pipeline(manifest: Manifest, order=None, finetune_hook: str | None = None,
                 opts: PipelineOptions = PipelineOptions(),
                 workdir=None) -> tuple[Manifest, PipelineReport]:
    """Estimate, compress, then fine-tune, one layer at a time.

    ``order`` defaults to every undecomposed conv layer in manifest order,
    minus ``opts.skip``. ``finetune_hook`` is a command template with
    ``{in}``/``{out}`` placeholders; its output manifest becomes the working
    model for the next iteration. A failing hook raises :class:`HookFailed`
    carrying the partial manifest and report.
    """
    if order is None:
        order = [r.id for r in manifest.layers if r.kind == "conv" and not r.decomposed]
    order = [lid for lid in order if lid not in opts.skip]
    if len(set(order)) != len(order):
        raise PipelineError("compression order lists a layer twice")
    for lid in order:
        rec = manifest.layer(lid)
        if rec.kind != "conv" or rec.decomposed:
            raise PipelineError(f"layer {lid!r} is not an undecomposed convolution")
    if finetune_hook and workdir is None:
        workdir = tempfile.mkdtemp(prefix="cprank-")
    report = PipelineReport()
    baseline = _totals(manifest)
    for step, lid in enumerate(order, start=1):
        manifest, entry = compress_layer(manifest, lid, decomposer=opts.decomposer,
                                         opts=opts.cp, timestamp=opts.timestamp)
        entry["iteration"] = step
        entry["hook"] = None
        if finetune_hook:
            code, out_path = _run_hook(finetune_hook, manifest, Path(workdir), step)
            entry["hook"] = {"exit_status": code}
            if code != 0:
                entry["status"] = "failed"
                report.entries.append(entry)
                report.status = "failed"
                report.final = {"baseline": baseline, "final": _totals(manifest)}
                raise HookFailed(f"fine-tune hook exited {code} after {lid}", code,
                                 manifest, report)
            try:
                manifest = load_manifest(out_path)
            except (OSError, ManifestError) as e:
                entry["status"] = "failed"
                entry["hook"]["error"] = str(e)
                report.entries.append(entry)
                report.status = "failed"
                report.final = {"baseline": baseline, "final": _totals(manifest)}
                raise HookFailed(f"fine-tune hook output invalid: {e}", 1,
                                 manifest, report) from None
        entry["status"] = "ok"
        report.entries.append(entry)
    report.final = {"baseline": baseline, "final": _totals(manifest)}
    return manifest, report
