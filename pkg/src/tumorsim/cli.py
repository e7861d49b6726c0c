"""Command line entry point: ``tumorsim <subcommand> ...``.

Exit codes: 0 success, 1 usage/config error, 2 IO error, 3 invariant or
verification failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .composer import generate_sample
from .errors import NonFiniteError, ShapeMismatchError, VerificationError, VolumeFormatError
from .losses import Decomposition, LossTarget, LossWeights, total_loss
from .metrics import CSV_COLUMNS, evaluate, summarize
from .presets import get_preset
from .seeding import file_digest, sample_rng
from .solver import SolverConfig, history_to_jsonl, solve, threshold
from .volume import (BinaryMask, Volume, as_mask, mean_intensity, read_volume, render_slice,
                     slice_plane, write_volume)

log = logging.getLogger("tumorsim")

MANIFEST = "manifest.json"
SAMPLE_FIELDS = ("x", "x_n", "s", "m")
DECOMP_FIELDS = ("x_hat", "s_hat", "m_hat")
VOLUME_SUFFIXES = (".nii", ".nii.gz", ".raw")

GENERATE_DEFAULTS = {
    "preset": "brain",
    "count": 1,
    "seed": 0,
    "workers": 1,
    "format": "nii",
    "normalize": "none",
    "roi": None,
    "pool": None,
    "out": None,
    "allow_self_donation": False,
    "spacing": None,
    "overrides": {},
}


class UsageError(Exception):
    pass


class PairingError(OSError):
    pass


def _volume_files(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.name.endswith(VOLUME_SUFFIXES))


def _case_name(path):
    name = path.name
    for suf in VOLUME_SUFFIXES:
        if name.endswith(suf):
            return name[: -len(suf)]
    return name


def _field_path(directory, name):
    for suf in VOLUME_SUFFIXES:
        p = Path(directory) / f"{name}{suf}"
        if p.exists():
            return p
    raise FileNotFoundError(f"missing field file {name!r} in {directory}")


def _parse_triple(text, what):
    try:
        vals = tuple(float(v) for v in str(text).split(","))
    except ValueError:
        raise UsageError(f"{what}: expected three comma-separated numbers, got {text!r}") from None
    if len(vals) != 3:
        raise UsageError(f"{what}: expected three comma-separated numbers, got {text!r}")
    return vals


def _normalize(v, mode, roi):
    if mode == "none":
        return v
    region = roi if roi is not None and roi.count else None
    data = v.data.astype(np.float64)
    mean = mean_intensity(v, region)
    if mode == "mean":
        if mean == 0:
            raise ValueError("cannot mean-normalise a zero-mean volume")
        return Volume((data / mean).astype(np.float32), v.spacing)
    if mode == "zscore":
        vals = data[region.data] if region is not None else data
        std = float(vals.std())
        if std == 0:
            raise ValueError("cannot z-score a constant volume")
        return Volume(((data - mean) / std).astype(np.float32), v.spacing)
    raise UsageError(f"unknown normalisation {mode!r}")


# ---------------------------------------------------------------------------
# generate / verify
# ---------------------------------------------------------------------------

def resolve_generate_config(config_path=None, **flags):
    """Defaults <- JSON config file <- explicit flags (``None`` flags are ignored)."""
    cfg = dict(GENERATE_DEFAULTS)
    if config_path:
        doc = json.loads(Path(config_path).read_text())
        unknown = set(doc) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(doc)
    cfg.update({k: v for k, v in flags.items() if v is not None})
    if not 0 <= int(cfg["seed"]) < 2 ** 64:
        raise UsageError("seed must be an unsigned 64-bit integer")
    if isinstance(cfg["spacing"], str):
        cfg["spacing"] = list(_parse_triple(cfg["spacing"], "spacing"))
    if int(cfg["count"]) < 1:
        raise UsageError("count must be >= 1")
    if int(cfg["workers"]) < 1:
        raise UsageError("workers must be >= 1")
    if cfg["pool"] is None or cfg["out"] is None:
        raise UsageError("generate needs --pool and --out (flag or config key)")
    if cfg["format"] not in ("nii", "nii.gz", "raw"):
        raise UsageError(f"format must be nii, nii.gz or raw, got {cfg['format']!r}")
    return cfg


def _write_sample(sample, directory, fmt):
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in SAMPLE_FIELDS:
        path = directory / f"{name}.{fmt}"
        write_volume(getattr(sample, name), path)
        files[name] = path
    return files


def cmd_generate(cfg):
    """Write ``count`` samples plus ``manifest.json``; returns the manifest dict."""
    try:
        preset = get_preset(cfg["preset"], cfg.get("overrides") or None)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if cfg.get("allow_self_donation"):
        from dataclasses import replace
        preset = replace(preset, allow_self_donation=True)
    pool_files = _volume_files(cfg["pool"])
    if not pool_files:
        raise FileNotFoundError(f"no volumes found in pool directory {cfg['pool']}")
    pool = [read_volume(p) for p in pool_files]
    if cfg.get("spacing"):
        pool = [Volume(v.data, cfg["spacing"]) for v in pool]
    roi = as_mask(read_volume(cfg["roi"])) if cfg.get("roi") else BinaryMask.full(pool[0].dims, pool[0].spacing)
    roi = BinaryMask(roi.data, pool[0].spacing)
    pool = [_normalize(v, cfg["normalize"], roi) for v in pool]
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    seed, fmt = int(cfg["seed"]), cfg["format"]

    def work(index):
        try:
            sample = generate_sample(pool, roi, preset, sample_rng(seed, index))
            sdir = out / "samples" / f"{index:06d}"
            files = _write_sample(sample, sdir, fmt)
        except Exception:
            log.error("sample %d failed", index)
            raise
        entry = {
            "index": index,
            "id": f"{index:06d}",
            "seed_stream": [seed, index],
            "files": {k: {"path": str(p.relative_to(out)), "digest": file_digest(p)} for k, p in files.items()},
            "alpha": sample.alpha,
            **{k: v for k, v in sample.record.items() if k != "alpha"},
        }
        (sdir / "sample.json").write_text(json.dumps(entry, indent=2, sort_keys=True) + "\n")
        return entry

    indices = range(int(cfg["count"]))
    with ThreadPoolExecutor(max_workers=int(cfg["workers"])) as ex:
        entries = list(ex.map(work, indices))

    snapshot = {k: v for k, v in cfg.items() if k not in ("workers", "out")}
    snapshot["pool_files"] = [p.name for p in pool_files]
    snapshot["resolved_preset"] = {
        "shape": preset.shape.to_dict(), "texture": preset.texture.to_dict(),
        "k_range": list(preset.k_range), "alpha_range": list(preset.alpha_range),
    }
    manifest = {"tool": "tumorsim", "version": __version__, "config": snapshot, "samples": entries}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    return path, json.loads(path.read_text())


def cmd_verify(manifest_path):
    """Re-hash every sample file; raises VerificationError listing mismatches."""
    path, manifest = _load_manifest(manifest_path)
    root = path.parent
    problems = []
    for entry in manifest["samples"]:
        for name, info in entry["files"].items():
            f = root / info["path"]
            if not f.exists():
                problems.append(f"{info['path']}: missing")
            elif file_digest(f) != info["digest"]:
                problems.append(f"{info['path']}: digest mismatch")
    if len(manifest["samples"]) != manifest["config"].get("count", len(manifest["samples"])):
        problems.append("entry count differs from configured sample count")
    if problems:
        raise VerificationError("; ".join(problems))
    return len(manifest["samples"])


# ---------------------------------------------------------------------------
# metrics / losses
# ---------------------------------------------------------------------------

def cmd_metrics(pred_dir, gt_dir, out_dir, spacing=None, workers=1):
    preds = {_case_name(p): p for p in _volume_files(pred_dir)}
    gts = {_case_name(p): p for p in _volume_files(gt_dir)}
    unpaired = sorted(set(preds) ^ set(gts))
    if unpaired:
        where = lambda c: "prediction" if c in preds else "ground truth"
        raise PairingError("unpaired files: " + ", ".join(f"{c} ({where(c)} only)" for c in unpaired))

    def score(case):
        gt = read_volume(gts[case])
        pred = read_volume(preds[case])
        if gt.dims != pred.dims:
            raise ShapeMismatchError(f"case {case}: dims {pred.dims} vs {gt.dims}")
        sp = spacing if spacing is not None else gt.spacing
        return case, evaluate(as_mask(pred), as_mask(gt), sp)

    with ThreadPoolExecutor(max_workers=max(1, int(workers))) as ex:
        rows = list(ex.map(score, sorted(gts)))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w") as fh:
        for case, rep in rows:
            fh.write(json.dumps({"case": case, **rep.to_dict()}, sort_keys=True) + "\n")
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for _, rep in rows:
            w.writerow(rep.csv_row())
    summary = {"cases": len(rows), "columns": summarize([r for _, r in rows])}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return rows, summary


def _read_decomposition(directory):
    return Decomposition(*(read_volume(_field_path(directory, n)).data for n in DECOMP_FIELDS))


def cmd_losses(samples_dir, decomp_dir, out_dir, weights=LossWeights(), alpha_mode="stored"):
    if alpha_mode not in ("stored", "unit"):
        raise UsageError("alpha mode must be 'stored' or 'unit'")
    _, manifest = _load_manifest(samples_dir)
    root = Path(samples_dir)
    rows = []
    for entry in manifest["samples"]:
        sdir = root / "samples" / entry["id"]
        fields = {n: read_volume(_field_path(sdir, n)).data for n in SAMPLE_FIELDS}
        alpha = float(entry["alpha"]) if alpha_mode == "stored" else 1.0
        target = LossTarget(fields["x"], fields["x_n"], fields["s"], fields["m"], alpha)
        d = _read_decomposition(Path(decomp_dir) / entry["id"])
        rep = total_loss(d, target, LossWeights(*weights.as_tuple, alpha=alpha))
        rows.append({"case": entry["id"], **rep.to_dict()})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "losses.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    cols = ["case", "l0", "l1", "l2", "l3", "total", "lambda0", "lambda1", "lambda2", "lambda3", "alpha"]
    with open(out / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow(["" if row[c] is None else row[c] for c in cols])
    return rows


# ---------------------------------------------------------------------------
# decompose / render
# ---------------------------------------------------------------------------

class _StoredSample:
    """Sample fields read back from a generated sample directory."""

    def __init__(self, directory):
        meta = json.loads((Path(directory) / "sample.json").read_text())
        for name in SAMPLE_FIELDS:
            setattr(self, name, read_volume(_field_path(directory, name)))
        self.alpha = float(meta["alpha"])
        self.spacing = self.x.spacing


def _decompose_one(source, mode, cfg, out_dir):
    if mode == "supervised":
        if not (Path(source).is_dir() and (Path(source) / "sample.json").exists()):
            raise UsageError("supervised mode needs a generated sample directory (with sample.json)")
        sample = _StoredSample(source)
        target = LossTarget(sample.x.data, sample.x_n.data, sample.s.data, sample.m.data, sample.alpha)
        spacing = sample.spacing
        d, history = solve(target, cfg, mode="supervised")
    else:
        x = read_volume(_field_path(source, "x")) if Path(source).is_dir() else read_volume(source)
        spacing = x.spacing
        d, history = solve(x, cfg, mode="real")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in DECOMP_FIELDS:
        write_volume(Volume(getattr(d, name).astype(np.float32), spacing), out / f"{name}.nii")
    write_volume(BinaryMask(threshold(d.m_hat), spacing), out / "mask.nii")
    (out / "trace.jsonl").write_text(history_to_jsonl(history))
    return d, history


def cmd_decompose(source, out_dir, mode="supervised", cfg=SolverConfig()):
    """Decompose one sample directory / volume, or every sample of a generated set."""
    if mode not in ("supervised", "real"):
        raise UsageError("mode must be 'supervised' or 'real'")
    source = Path(source)
    if (source / MANIFEST).exists():
        _, manifest = _load_manifest(source)
        return {e["id"]: _decompose_one(source / "samples" / e["id"], mode, cfg, Path(out_dir) / e["id"])
                for e in manifest["samples"]}
    return _decompose_one(source, mode, cfg, out_dir)


def mask_outline(plane):
    """In-plane boundary of a 2D mask (4-neighbourhood; the image border counts as outside)."""
    p = np.pad(plane.astype(bool), 1, constant_values=False)
    inner = p[1:-1, 1:-1] & p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return plane.astype(bool) & ~inner


def cmd_render(volume_path, out_path, axis, index, window, mask_path=None):
    v = read_volume(volume_path)
    img = render_slice(v, axis, index, window)
    if mask_path is not None:
        m = as_mask(read_volume(mask_path))
        if m.dims != v.dims:
            raise ShapeMismatchError(f"overlay dims {m.dims} do not match volume dims {v.dims}")
        pixels = img.pixels.copy()
        pixels[mask_outline(slice_plane(m.data, axis, index))] = 255
        img = type(img)(pixels, img.axis, img.index)
    img.write_pgm(out_path)
    return img


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="tumorsim", description="Synthetic tumor simulation and evaluation toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="simulate tumor samples from a pool of normal volumes")
    g.add_argument("--config", help="JSON config; flags override its keys")
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.add_argument("--pool")
    g.add_argument("--count", type=int)
    g.add_argument("--preset", choices=("brain", "liver", "custom"))
    g.add_argument("--workers", type=int)
    g.add_argument("--roi", help="mask volume restricting tumor centers (default: whole grid)")
    g.add_argument("--format", choices=("nii", "nii.gz", "raw"))
    g.add_argument("--normalize", choices=("none", "mean", "zscore"),
                   help="pool preprocessing before generation (default none)")
    g.add_argument("--allow-self-donation", action="store_true", default=None)
    g.add_argument("--spacing", help="sx,sy,sz in mm; overrides the spacing stored in the pool files")

    m = sub.add_parser("metrics", help="score predicted masks against ground truth")
    m.add_argument("--pred", required=True)
    m.add_argument("--gt", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--spacing", help="sx,sy,sz in mm (default: from the ground-truth files)")
    m.add_argument("--workers", type=int, default=1)

    lo = sub.add_parser("losses", help="evaluate decomposition losses against generated samples")
    lo.add_argument("--samples", required=True, help="output directory of 'generate'")
    lo.add_argument("--decomp", required=True, help="directory with <id>/{x_hat,s_hat,m_hat}")
    lo.add_argument("--out", required=True)
    lo.add_argument("--weights", default="1,1,1,1")
    lo.add_argument("--alpha-mode", choices=("stored", "unit"), default="stored")

    d = sub.add_parser("decompose", help="recover (x_hat, s_hat, m_hat) by per-volume optimisation")
    d.add_argument("--input", required=True, help="sample directory, generated set, or volume file")
    d.add_argument("--out", required=True)
    d.add_argument("--mode", choices=("supervised", "real"), default="supervised")
    d.add_argument("--max-iter", type=int, default=SolverConfig.max_iterations)
    d.add_argument("--tol", type=float, default=SolverConfig.tolerance)
    d.add_argument("--weights", default="1,1,1,1")
    d.add_argument("--init", choices=("zero", "normal"), default="zero")
    d.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("render", help="write one slice as a binary PGM")
    r.add_argument("--volume", required=True)
    r.add_argument("--mask")
    r.add_argument("--axis", choices=("axial", "coronal", "sagittal"), default="axial")
    r.add_argument("--index", type=int, required=True)
    r.add_argument("--window", required=True, help="lo,hi")
    r.add_argument("--out", required=True)

    v = sub.add_parser("verify", help="check sample files against manifest digests")
    v.add_argument("--manifest", required=True, help="manifest.json or its directory")

    ph = sub.add_parser("phantoms", help="write a demo pool of synthetic normal volumes")
    ph.add_argument("--out", required=True)
    ph.add_argument("--count", type=int, default=4)
    ph.add_argument("--dims", default="32,32,32")
    ph.add_argument("--seed", type=int, default=0)
    return p


def _dispatch(args):
    if args.command == "generate":
        cfg = resolve_generate_config(
            args.config, seed=args.seed, out=args.out, pool=args.pool, count=args.count,
            preset=args.preset, workers=args.workers, roi=args.roi, format=args.format,
            normalize=args.normalize, allow_self_donation=args.allow_self_donation, spacing=args.spacing)
        manifest = cmd_generate(cfg)
        print(f"wrote {len(manifest['samples'])} samples to {cfg['out']}")
    elif args.command == "metrics":
        spacing = _parse_triple(args.spacing, "--spacing") if args.spacing else None
        rows, summary = cmd_metrics(args.pred, args.gt, args.out, spacing, args.workers)
        d = summary["columns"]["dice"]
        print(f"{len(rows)} cases; dice {d['mean']:.4f} +- {d['std'] or 0.0:.4f}")
    elif args.command == "losses":
        try:
            weights = LossWeights.parse(args.weights)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        rows = cmd_losses(args.samples, args.decomp, args.out, weights, args.alpha_mode)
        print(f"{len(rows)} cases written to {args.out}")
    elif args.command == "decompose":
        try:
            cfg = SolverConfig(max_iterations=args.max_iter, tolerance=args.tol, init=args.init,
                               seed=args.seed, weights=LossWeights.parse(args.weights))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        cmd_decompose(args.input, args.out, args.mode, cfg)
        print(f"decomposition written to {args.out}")
    elif args.command == "render":
        window = tuple(float(w) for w in args.window.split(","))
        if len(window) != 2:
            raise UsageError("--window expects lo,hi")
        cmd_render(args.volume, args.out, args.axis, args.index, window, args.mask)
    elif args.command == "verify":
        n = cmd_verify(args.manifest)
        print(f"verified {n} samples")
    elif args.command == "phantoms":
        from .phantom import make_pool
        dims = tuple(int(float(v)) for v in _parse_triple(args.dims, "--dims"))
        pool, roi = make_pool(args.count, dims, args.seed)
        out = Path(args.out)
        (out / "pool").mkdir(parents=True, exist_ok=True)
        for i, vol in enumerate(pool):
            write_volume(vol, out / "pool" / f"normal_{i:03d}.nii")
        write_volume(roi, out / "roi.nii")
        print(f"wrote {len(pool)} volumes to {out / 'pool'} and ROI to {out / 'roi.nii'}")


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help / --version / usage errors
        return exc.code if isinstance(exc.code, int) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except UsageError as exc:
        print(f"tumorsim: usage error: {exc}", file=sys.stderr)
        return 1
    except (VerificationError, ShapeMismatchError) as exc:
        print(f"tumorsim: verification failed: {exc}", file=sys.stderr)
        return 3
    except (OSError, VolumeFormatError, NonFiniteError, json.JSONDecodeError) as exc:
        print(f"tumorsim: IO error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, IndexError) as exc:
        print(f"tumorsim: invalid input: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
