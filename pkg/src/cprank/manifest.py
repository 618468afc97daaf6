"""Model manifests: an ordered list of layer records backed by tensor blobs.

A manifest is a JSON file (``format_version`` 1) whose blob paths are
resolved against the manifest's own directory. Weights are read lazily;
layers produced in memory (e.g. by compression) carry their arrays until
the manifest is saved.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path

import jsonschema
import numpy as np

from .blob import BlobFormatError, load_blob, read_dims, save_blob
from .cost import FCSpec
from .tensors import ConvLayerSpec

FORMAT_VERSION = 1

_COUNT = {"type": "integer", "minimum": 1}
_PROVENANCE = {
    "type": ["object", "null"],
    "additionalProperties": False,
    "required": ["group_id", "source", "rank", "decomposer", "stage"],
    "properties": {
        "group_id": {"type": "string"},
        "source": {"type": "string"},
        "rank": _COUNT,
        "decomposer": {"enum": ["als", "tpm", "svd"]},
        "stage": _COUNT,
        "timestamp": {"type": ["string", "null"]},
    },
}
_CONV = {
    "type": "object",
    "additionalProperties": False,
    "required": ["id", "kind", "D", "S", "T", "group", "stride", "pad", "in_h", "in_w",
                 "out_h", "out_w", "blob", "decomposed"],
    "properties": {
        "id": {"type": "string", "minLength": 1},
        "kind": {"const": "conv"},
        "D": _COUNT, "S": _COUNT, "T": _COUNT, "group": _COUNT, "stride": _COUNT,
        "pad": {"type": "integer", "minimum": 0},
        "in_h": _COUNT, "in_w": _COUNT, "out_h": _COUNT, "out_w": _COUNT,
        "blob": {"type": ["string", "null"]},
        "decomposed": {"type": "boolean"},
        "two_way": {"type": "boolean"},
        "provenance": _PROVENANCE,
    },
}
_FC = {
    "type": "object",
    "additionalProperties": False,
    "required": ["id", "kind", "in_features", "out_features", "blob", "decomposed"],
    "properties": {
        "id": {"type": "string", "minLength": 1},
        "kind": {"const": "fc"},
        "in_features": _COUNT,
        "out_features": _COUNT,
        "blob": {"type": ["string", "null"]},
        "decomposed": {"const": False},
    },
}
SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["format_version", "name", "layers"],
    "properties": {
        "format_version": {"const": FORMAT_VERSION},
        "name": {"type": "string"},
        "layers": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["kind"],
                "properties": {"kind": {"enum": ["conv", "fc"]}},
                "if": {"properties": {"kind": {"const": "conv"}}},
                "then": _CONV,
                "else": _FC,
            },
        },
    },
}


class ManifestError(ValueError):
    """Schema or consistency violation in a manifest."""


class DanglingBlobError(ManifestError):
    """A layer references a blob file that does not exist."""


@dataclass(frozen=True)
class LayerRecord:
    spec: ConvLayerSpec | FCSpec
    blob: str | None = None
    decomposed: bool = False
    two_way: bool = False
    provenance: dict | None = None

    @property
    def id(self) -> str:
        return self.spec.id

    @property
    def kind(self) -> str:
        return "fc" if isinstance(self.spec, FCSpec) else "conv"

    @property
    def blob_shape(self) -> tuple[int, ...]:
        if isinstance(self.spec, FCSpec):
            return (self.spec.in_features, self.spec.out_features)
        return self.spec.kernel_shape

    def to_json(self) -> dict:
        s = self.spec
        if isinstance(s, FCSpec):
            return {"id": s.id, "kind": "fc", "in_features": s.in_features,
                    "out_features": s.out_features, "blob": self.blob, "decomposed": False}
        out = {"id": s.id, "kind": "conv", "D": s.D, "S": s.S, "T": s.T, "group": s.group,
               "stride": s.stride, "pad": s.pad, "in_h": s.in_h, "in_w": s.in_w,
               "out_h": s.out_h, "out_w": s.out_w, "blob": self.blob,
               "decomposed": self.decomposed, "two_way": self.two_way}
        if self.provenance is not None:
            out["provenance"] = dict(self.provenance)
        return out


@dataclass(frozen=True)
class Manifest:
    name: str
    layers: tuple[LayerRecord, ...]
    base_dir: Path = Path(".")
    # arrays for layers not yet written to disk, keyed by layer id
    pending: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        ids = [r.id for r in self.layers]
        dup = {i for i in ids if ids.count(i) > 1}
        if dup:
            raise ManifestError(f"duplicate layer id(s): {sorted(dup)}")

    def specs(self):
        return [r.spec for r in self.layers]

    def layer(self, layer_id: str) -> LayerRecord:
        for r in self.layers:
            if r.id == layer_id:
                return r
        raise KeyError(f"unknown layer {layer_id!r}")

    def index(self, layer_id: str) -> int:
        return [r.id for r in self.layers].index(self.layer(layer_id).id)

    def blob_path(self, record: LayerRecord) -> Path | None:
        return None if record.blob is None else self.base_dir / record.blob

    def weights(self, layer_id: str) -> np.ndarray:
        if layer_id in self.pending:
            return self.pending[layer_id]
        rec = self.layer(layer_id)
        if rec.blob is None:
            raise ManifestError(f"layer {layer_id!r} has no weights (geometry only)")
        w = load_blob(self.blob_path(rec))
        if w.shape != rec.blob_shape:
            raise ManifestError(
                f"layer {layer_id!r}: blob dims {w.shape} != geometry {rec.blob_shape}")
        return w

    def to_json(self) -> dict:
        return {"format_version": FORMAT_VERSION, "name": self.name,
                "layers": [r.to_json() for r in self.layers]}

    def replace_layer(self, layer_id: str, records, arrays: dict) -> "Manifest":
        i = self.index(layer_id)
        layers = self.layers[:i] + tuple(records) + self.layers[i + 1:]
        pending = {k: v for k, v in self.pending.items() if k != layer_id}
        pending.update(arrays)
        return replace(self, layers=layers, pending=pending)

    def with_weights(self, arrays: dict) -> "Manifest":
        for k, v in arrays.items():
            if np.shape(v) != self.layer(k).blob_shape:
                raise ManifestError(f"layer {k!r}: new weights have shape {np.shape(v)}")
        return replace(self, pending={**self.pending, **arrays})


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _record_from_json(d: dict) -> LayerRecord:
    if d["kind"] == "fc":
        return LayerRecord(FCSpec(d["id"], d["in_features"], d["out_features"]), d["blob"])
    try:
        spec = ConvLayerSpec(d["id"], d["D"], d["S"], d["T"], d["group"], d["stride"],
                             d["pad"], d["in_h"], d["in_w"])
    except ValueError as e:
        raise ManifestError(str(e)) from None
    if (spec.out_h, spec.out_w) != (d["out_h"], d["out_w"]):
        raise ManifestError(
            f"layers[{d['id']}]: out size {(d['out_h'], d['out_w'])} inconsistent with "
            f"geometry (expected {(spec.out_h, spec.out_w)})")
    return LayerRecord(spec, d["blob"], d["decomposed"], d.get("two_way", False),
                       d.get("provenance"))


def manifest_from_json(obj, base_dir=".", check_blobs: bool = True) -> Manifest:
    try:
        jsonschema.validate(obj, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ManifestError(f"{where}: {e.message}") from None
    m = Manifest(obj["name"], tuple(_record_from_json(d) for d in obj["layers"]),
                 Path(base_dir))
    if check_blobs:
        for rec in m.layers:
            path = m.blob_path(rec)
            if path is None:
                continue
            if not path.is_file():
                raise DanglingBlobError(f"layer {rec.id!r}: blob {rec.blob!r} not found")
            try:
                dims = read_dims(path)
            except BlobFormatError as e:
                raise ManifestError(f"layer {rec.id!r}: {e}") from None
            if tuple(dims) != rec.blob_shape:
                raise ManifestError(
                    f"layer {rec.id!r}: blob dims {dims} != geometry {rec.blob_shape}")
    return m


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: not valid JSON ({e})") from None
    return manifest_from_json(obj, path.parent)


def save_manifest(manifest: Manifest, path) -> Manifest:
    """Write the manifest and its blobs; returns the manifest rooted at the new location."""
    path = Path(path)
    out_dir = path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    for rec in manifest.layers:
        if rec.blob is None:
            continue
        dest = out_dir / rec.blob
        dest.parent.mkdir(parents=True, exist_ok=True)
        if rec.id in manifest.pending:
            save_blob(manifest.pending[rec.id], dest)
        else:
            src = manifest.blob_path(rec)
            if src.resolve() != dest.resolve():
                shutil.copyfile(src, dest)
    path.write_text(canonical_json(manifest.to_json()), encoding="utf-8")
    return replace(manifest, base_dir=out_dir, pending={})
