"""Command line interface.

Exit status: 0 on success, 1 on validation errors, 2 on numerical failures.
A failing fine-tune hook in ``pipeline`` propagates the hook's own status.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import alexnet
from .blob import BlobFormatError
from .cost import model_stats
from .cp import CPOptions
from .manifest import (
    LayerRecord,
    Manifest,
    ManifestError,
    canonical_json,
    load_manifest,
    save_manifest,
)
from .pipeline import HookFailed, PipelineError, PipelineOptions, compress_layer, run_pipeline
from .tensors import conv_forward
from .vbmf import layer_rank

log = logging.getLogger("cprank")


class NumericalFailure(RuntimeError):
    pass


def _write_json(obj, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(canonical_json(obj), encoding="utf-8")


def _cp_opts(args) -> CPOptions:
    return CPOptions(max_sweeps=args.sweeps, tol=args.tol, seed=args.seed,
                     restarts=args.restarts)


def cmd_estimate_rank(args):
    m = load_manifest(args.model)
    if args.layer:
        targets = [m.layer(args.layer)]
    else:
        targets = [r for r in m.layers
                   if r.kind == "conv" and not r.decomposed and r.blob is not None]
    out = []
    for rec in targets:
        rep = layer_rank(m.weights(rec.id), rec.spec, rec.two_way)
        per_group = " ".join(
            "/".join(str(r) for _, r in sorted(g.items())) for g in rep.mode_ranks())
        suffix = f"x{rec.spec.group}" if rec.spec.group > 1 else ""
        print(f"{rec.id:12s} modes[{per_group}]  rank {rep.rank}{suffix}"
              + ("  (clamped)" if rep.clamped else ""))
        out.append(rep.to_dict())
    if args.json:
        _write_json({"layers": out}, args.json)


def cmd_decompose(args):
    m = load_manifest(args.model)
    m, entry = compress_layer(m, args.layer, args.rank, args.decomposer, _cp_opts(args))
    save_manifest(m, args.out)
    print(f"{args.layer}: rank {entry['rank']} via {entry['decomposer']} -> "
          f"{', '.join(entry['stages'])}")


def cmd_stats(args):
    m = load_manifest(args.model)
    base = model_stats(load_manifest(args.baseline)) if args.baseline else None
    s = model_stats(m, base)
    for lid, c in s.layers.items():
        print(f"{lid:12s} params {c.params:>12,d}  multadds {c.multadds:>14,d}")
    print(f"{'total':12s} params {s.params:>12,d}  multadds {s.multadds:>14,d}")
    if base is not None:
        print(f"ratio        params x{s.params_ratio:.3f}  multadds x{s.multadds_ratio:.3f}")
    if args.json:
        _write_json(s.to_dict(), args.json)


def cmd_pipeline(args):
    m = load_manifest(args.model)
    order = args.order.split(",") if args.order else None
    opts = PipelineOptions(decomposer=args.decomposer, cp=_cp_opts(args),
                           skip=frozenset(args.skip_layer or ()))
    workdir = Path(args.out).parent / ".cprank-work" if args.finetune_cmd else None
    try:
        m, report = run_pipeline(m, order, args.finetune_cmd, opts, workdir)
    except HookFailed as e:
        save_manifest(e.manifest, args.out)
        _write_json(e.report.to_dict(), args.report)
        log.error("%s", e)
        return e.returncode
    save_manifest(m, args.out)
    _write_json(report.to_dict(), args.report)
    for entry in report.entries:
        print(f"{entry['iteration']:2d}. {entry['layer']:10s} rank {entry['rank']}")


def _stage_chain(m: Manifest, source: str) -> list[LayerRecord]:
    recs = [r for r in m.layers if r.provenance and r.provenance.get("source") == source]
    if recs:
        return sorted(recs, key=lambda r: r.provenance["stage"])
    rec = m.layer(source)
    return [rec]


def cmd_verify(args):
    a = load_manifest(args.model)
    b = load_manifest(args.against)
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for rec in a.layers:
        if rec.kind != "conv" or rec.blob is None or rec.decomposed:
            continue
        chain = _stage_chain(b, rec.id)
        s = rec.spec
        ka = a.weights(rec.id)
        kb = [b.weights(r.id) for r in chain]
        errs = []
        for _ in range(args.inputs):
            x = rng.standard_normal((s.S, s.in_h, s.in_w))
            ya = conv_forward(x, s, ka)
            yb = x
            for r, k in zip(chain, kb):
                yb = conv_forward(yb, r.spec, k)
            if yb.shape != ya.shape:
                raise ManifestError(f"{rec.id}: output shapes {ya.shape} vs {yb.shape}")
            errs.append(np.linalg.norm(ya - yb) / max(np.linalg.norm(ya), 1e-300))
        err = max(errs) if errs else 0.0
        worst = max(worst, err)
        flag = "ok" if err <= args.tol else "MISMATCH"
        print(f"{rec.id:12s} stages {len(chain)}  max rel err {err:.3e}  {flag}")
    if worst > args.tol:
        raise NumericalFailure(f"max relative error {worst:.3e} exceeds {args.tol:g}")


def cmd_fixture(args):
    m = alexnet.geometry_manifest(with_weights=args.random_weights, seed=args.seed)
    save_manifest(m, args.out)
    print(f"wrote {args.out}")


def _add_cp_args(p):
    p.add_argument("--decomposer", choices=("als", "tpm"), default="als")
    p.add_argument("--sweeps", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=int, default=5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cprank", description="VBMF rank selection and CP compression of conv layers")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate-rank", help="VBMF rank per conv layer")
    p.add_argument("--model", required=True)
    p.add_argument("--layer")
    p.add_argument("--json")
    p.set_defaults(func=cmd_estimate_rank)

    p = sub.add_parser("decompose", help="compress one layer")
    p.add_argument("--model", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--rank", type=int)
    _add_cp_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("stats", help="parameter and mult-add totals")
    p.add_argument("--model", required=True)
    p.add_argument("--baseline")
    p.add_argument("--json")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("pipeline", help="iterative compress / fine-tune")
    p.add_argument("--model", required=True)
    p.add_argument("--order")
    p.add_argument("--skip-layer", action="append")
    p.add_argument("--finetune-cmd")
    _add_cp_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("verify", help="compare layer outputs of two manifests")
    p.add_argument("--model", required=True)
    p.add_argument("--against", required=True)
    p.add_argument("--inputs", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("fixture", help="write the AlexNet geometry manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--random-weights", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fixture)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except (NumericalFailure, np.linalg.LinAlgError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except (ManifestError, BlobFormatError, PipelineError, KeyError, ValueError,
            OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
