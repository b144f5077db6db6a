"""Command-line entry point.

Exit status: 0 success, 1 error, 2 finished but at least one result is
flagged as a mismatch. Per-pair results are JSON lines; tables are CSV.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import phase_correlation_baseline
from .config import ConfigError, RunConfig, load_run_config, parse_phantom_spec
from .evaluation import (
    EvaluationError,
    JointSeries,
    RegistrationCache,
    RegistrationTask,
    baseline_sigma_prime,
    batch_evaluate,
    consistency_values,
    draw_translations,
    map_tasks,
    population_std,
    sigma_consistency,
    sigma_prime,
)
from .imaging import (
    ImageFormatError,
    JointImage,
    read_image,
    read_mask,
    render_spectrum,
    write_image,
    write_mask,
)
from .loss import euclidean_loss, loss_spectrum
from .phantom import PhantomError, SegmentationError, generate_pair, heuristic_segment, segmentation_metrics
from .registration import register_pair
from .transform import CONVENTION

log = logging.getLogger("jsnreg")

EXIT_OK, EXIT_ERROR, EXIT_MISMATCH = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would read as a mismatch here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ output


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def _dumps(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, default=_json_default)


def emit_records(records, out: str | None) -> None:
    """Append records as JSON lines to ``out`` (stdout when None) through one writer."""
    lines = "".join(_dumps(r) + "\n" for r in records)
    if out is None:
        sys.stdout.write(lines)
        sys.stdout.flush()
        return
    with open(out, "a", encoding="utf-8") as fh:
        fh.write(lines)


def write_csv(path: str | None, header: list[str], rows: list[list]) -> None:
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(v)
        return v

    if path is None:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows([[fmt(v) for v in r] for r in rows])
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([[fmt(v) for v in r] for r in rows])


def _record(command: str, run: RunConfig, inputs: dict, result: dict, t0: float) -> dict:
    return {
        "command": command,
        "inputs": inputs,
        "result": result,
        "config_digest": run.digest(),
        "tool_version": __version__,
        "convention": CONVENTION,
        "duration_s": round(time.perf_counter() - t0, 6),
    }


def _out_dir(run: RunConfig, out: str | None) -> Path:
    if run.output_dir:
        d = Path(run.output_dir)
    elif out:
        d = Path(out).resolve().parent
    else:
        d = Path.cwd()
    if not d.is_dir():
        raise OSError(f"{d}: output directory does not exist")
    return d


# -------------------------------------------------------------- manifests


def read_manifest(path: str | Path) -> list[dict]:
    """JSON-lines manifest; relative paths resolve against the manifest's folder."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    base = path.resolve().parent
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{n}: {exc}") from exc
        if not isinstance(rec, dict):
            raise ConfigError(f"{path}:{n}: record must be an object")
        for key in ("image", "mask", "fixed", "moving", "fixed_mask", "moving_mask"):
            if key in rec:
                p = Path(rec[key])
                rec[key] = str(p if p.is_absolute() else base / p)
        out.append(rec)
    if not out:
        raise ConfigError(f"{path}: empty manifest")
    return out


def _require(rec: dict, *keys):
    missing = [k for k in keys if k not in rec]
    if missing:
        raise ConfigError(f"manifest record lacks {', '.join(missing)}: {rec}")


def _load_task(rec: dict, run: RunConfig, n: int) -> RegistrationTask:
    _require(rec, "fixed", "moving", "fixed_mask")
    res = run.resolution_mm_per_px or rec.get("resolution_mm_per_px")
    fixed = read_image(rec["fixed"], res)
    moving = read_image(rec["moving"], res)
    fm = read_mask(rec["fixed_mask"])
    mm = read_mask(rec.get("moving_mask", rec["fixed_mask"]))
    return RegistrationTask(fixed, moving, fm, mm, pair_id=str(rec.get("pair_id", f"task{n}")),
                            truth_jsn_pixels=rec.get("truth_jsn_px"), meta=dict(rec.get("tags", {})))


# ---------------------------------------------------------------- commands


def cmd_register(args, run: RunConfig) -> int:
    t0 = time.perf_counter()
    fixed = read_image(args.fixed, run.resolution_mm_per_px)
    moving = read_image(args.moving, run.resolution_mm_per_px)
    fm, mm = read_mask(args.fixed_mask), read_mask(args.moving_mask)
    keep = run.emit_warped or run.emit_spectra
    out_dir = _out_dir(run, args.out) if keep else None
    r = register_pair(fixed, moving, fm, mm, run.optimizer, run.weights, keep_warped=keep)
    result = r.to_dict()
    tag = f"{fixed.identity}__{moving.identity}"
    if run.emit_warped:
        p = out_dir / f"{tag}_warped.pgm"
        write_image(p, r.warped)
        result["warped_path"] = str(p)
    if run.emit_spectra:
        po, pw = out_dir / f"{tag}_spectrum_original.ppm", out_dir / f"{tag}_spectrum_warped.ppm"
        render_spectrum(loss_spectrum(fixed, moving), po)
        render_spectrum(loss_spectrum(fixed, r.warped), pw)
        result["spectrum_paths"] = [str(po), str(pw)]
    inputs = {"fixed": fixed.identity, "moving": moving.identity,
              "fixed_mask": Path(args.fixed_mask).name, "moving_mask": Path(args.moving_mask).name}
    emit_records([_record("register", run, inputs, result, t0)], args.out)
    return EXIT_MISMATCH if r.mismatch else EXIT_OK


def _register_job(job):
    i, j, fixed, moving, fm, mm, cfg, w = job
    return (i, j), register_pair(fixed, moving, fm, mm, cfg, w)


def cmd_series(args, run: RunConfig) -> int:
    t0 = time.perf_counter()
    recs = read_manifest(args.manifest)
    for r in recs:
        _require(r, "image", "mask")
    if any("time" in r for r in recs):
        recs = sorted(recs, key=lambda r: float(r.get("time", 0.0)))
    times = [float(r.get("time", k)) for k, r in enumerate(recs)]
    images = [read_image(r["image"], run.resolution_mm_per_px or r.get("resolution_mm_per_px")) for r in recs]
    masks = [read_mask(r["mask"]) for r in recs]
    series = JointSeries(str(recs[0].get("joint", "series")), tuple(images), tuple(masks))
    n = len(series)
    cache = RegistrationCache(series, run.optimizer, run.weights)
    jobs = [(i, j, images[i], images[j], masks[i], masks[j], run.optimizer, run.weights)
            for i in range(n) for j in range(n) if i != j]
    for key, res in map_tasks(_register_job, jobs, args.jobs):
        cache.store(*key, res)

    rows, records, any_mismatch = [], [], False
    for i in range(n):
        for j in range(i + 1, n):
            r = cache(i, j)
            any_mismatch |= r.mismatch
            try:
                s = sigma_consistency(series, i, j, cache=cache)
                sig_px, sig_mm = s.sigma_pixels, s.sigma_mm
            except EvaluationError as exc:
                log.warning("pair %d-%d: %s", i, j, exc)
                sig_px = sig_mm = None
            rows.append([f"{i}-{j}", images[i].identity, images[j].identity, times[j] - times[i],
                         r.jsn_pixels, r.jsn_mm, sig_px, sig_mm, int(r.mismatch)])
            result = r.to_dict()
            result.update(sigma_px=sig_px, sigma_mm=sig_mm, fixed_index=i, moving_index=j)
            records.append(_record("series", run, {"fixed": images[i].identity, "moving": images[j].identity},
                                   result, t0))
    write_csv(args.out, ["pair", "fixed", "moving", "dt", "jsn_px", "jsn_mm", "sigma_px", "sigma_mm", "mismatch"],
              rows)
    if args.records:
        emit_records(records, args.records)
    return EXIT_MISMATCH if any_mismatch else EXIT_OK


def cmd_sigma_prime(args, run: RunConfig) -> int:
    t0 = time.perf_counter()
    fixed = read_image(args.fixed, run.resolution_mm_per_px)
    moving = read_image(args.moving, run.resolution_mm_per_px)
    fm, mm = read_mask(args.fixed_mask), read_mask(args.moving_mask)
    tr = draw_translations(run.rng_seed, args.perturbations)
    s = sigma_prime(fixed, moving, fm, mm, run.optimizer, run.weights, translations=tr)
    result = {
        "sigma_prime_px": s.sigma_prime_pixels,
        "sigma_prime_mm": s.sigma_prime_mm,
        "used": s.used,
        "jsn_px": list(s.values),
        "kept": list(s.kept),
        "translations_px": [list(t) for t in s.translations],
    }
    emit_records([_record("sigma-prime", run, {"fixed": fixed.identity, "moving": moving.identity}, result, t0)],
                 args.out)
    return EXIT_MISMATCH if s.used < len(tr) else EXIT_OK


def cmd_phantom(args, run: RunConfig) -> int:
    try:
        text = Path(args.spec).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read phantom spec {args.spec}: {exc}") from exc
    spec = parse_phantom_spec(text, args.spec)
    if args.seed is not None:
        spec = replace(spec, rng_seed=args.seed)
    if args.resolution_mm is not None:
        spec = replace(spec, resolution=args.resolution_mm)
    pair = generate_pair(spec)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_image(out / "fixed.pgm", pair.fixed)
    write_image(out / "moving.pgm", pair.moving)
    write_mask(out / "fixed_mask.pgm", pair.fixed_mask)
    write_mask(out / "moving_mask.pgm", pair.moving_mask)
    meta = pair.metadata()
    meta["rng_seed"] = spec.rng_seed
    meta["noise_sigma"] = spec.noise_sigma
    (out / "truth.json").write_text(_dumps(meta) + "\n", encoding="utf-8")
    task = {"fixed": "fixed.pgm", "moving": "moving.pgm", "fixed_mask": "fixed_mask.pgm",
            "moving_mask": "moving_mask.pgm", "truth_jsn_px": pair.truth_jsn_pixels, "pair_id": out.name}
    (out / "manifest.jsonl").write_text(_dumps(task) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_segment(args, run: RunConfig) -> int:
    if args.out is None:
        raise UsageError("segment needs --out for the mask file")
    img = read_image(args.image, run.resolution_mm_per_px)
    mask = heuristic_segment(img)
    write_mask(args.out, mask)
    return EXIT_OK


def cmd_seg_metrics(args, run: RunConfig) -> int:
    t0 = time.perf_counter()
    pred, truth = read_mask(args.predicted), read_mask(args.truth)
    m = segmentation_metrics(pred, truth)
    emit_records([_record("seg-metrics", run, {"predicted": Path(args.predicted).name,
                                               "truth": Path(args.truth).name}, m, t0)], args.out)
    return EXIT_OK


def cmd_spectrum(args, run: RunConfig) -> int:
    t0 = time.perf_counter()
    if args.out is None:
        raise UsageError("spectrum needs --out for the heatmap file")
    a = read_image(args.fixed, run.resolution_mm_per_px)
    b = read_image(args.moving, run.resolution_mm_per_px)
    spec = loss_spectrum(a, b)
    render_spectrum(spec, args.out)
    emit_records([_record("spectrum", run, {"fixed": a.identity, "moving": b.identity},
                          {"loss": euclidean_loss(a, b), "heatmap_path": args.out}, t0)], args.records)
    return EXIT_OK


def _baseline_job(args):
    task, = args
    try:
        return phase_correlation_baseline(task.fixed, task.moving, task.fixed_mask), None
    except ValueError as exc:
        return None, str(exc)


def _sigma_prime_job(args):
    task, cfg, w, tr = args
    try:
        opt = sigma_prime(task.fixed, task.moving, task.fixed_mask, task.moving_mask, cfg, w, translations=tr)
        opt_px = opt.sigma_prime_pixels
    except EvaluationError:
        opt_px = None
    try:
        base = baseline_sigma_prime(task.fixed, task.moving, task.fixed_mask, task.moving_mask, tr)
        base_px = base.sigma_prime_pixels
    except EvaluationError:
        base_px = None
    return opt_px, base_px


def _joint_sigma(tasks, results, baseline):
    """Mean consistency sigma per method over joints that contribute three or more images.

    Images of a joint are the distinct fixed/moving files of its tasks in
    order of appearance; every ordered pair of them must appear as a task.
    """
    groups = {}
    for k, t in enumerate(tasks):
        joint = t.meta.get("joint")
        if joint is not None:
            groups.setdefault(joint, []).append(k)
    sig_opt, sig_base = [], []
    for joint, idx in groups.items():
        names = []
        for k in idx:
            for ident in (tasks[k].fixed.identity, tasks[k].moving.identity):
                if ident not in names:
                    names.append(ident)
        if len(names) < 3:
            continue
        lookup = {(names.index(tasks[k].fixed.identity), names.index(tasks[k].moving.identity)): k for k in idx}
        f, g = 0, len(names) - 1

        def pick(src):
            def jsn_of(i, j):
                k = lookup.get((i, j))
                r = src[k] if k is not None else None
                return (np.nan, True) if r is None else (r.jsn_pixels, r.mismatch)
            return jsn_of

        for src, acc in ((results, sig_opt), (baseline, sig_base)):
            vals, _, _ = consistency_values(pick(src), len(names), f, g)
            if vals:
                acc.append(population_std(vals))
    mean = lambda v: float(np.mean(v)) if v else None  # noqa: E731
    return mean(sig_opt), mean(sig_base)


def cmd_bench(args, run: RunConfig) -> int:
    t0 = time.perf_counter()
    recs = read_manifest(args.manifest)
    tasks = []
    for n, rec in enumerate(recs):
        t = _load_task(rec, run, n)
        if "joint" in rec:
            t.meta["joint"] = rec["joint"]
        tasks.append(t)
    outcome = batch_evaluate(tasks, run.optimizer, run.weights, jobs=args.jobs)
    base = [b for b, _ in map_tasks(_baseline_job, [(t,) for t in tasks], args.jobs)]

    sp_opt, sp_base = [], []
    if args.perturbations > 0:
        tr = draw_translations(run.rng_seed, args.perturbations)
        for o, b in map_tasks(_sigma_prime_job, [(t, run.optimizer, run.weights, tr) for t in tasks], args.jobs):
            if o is not None:
                sp_opt.append(o)
            if b is not None:
                sp_base.append(b)
    sig_opt, sig_base = _joint_sigma(tasks, outcome.results, base)
    res_mm = tasks[0].fixed.resolution

    def err(r, t):
        if r is None or t.truth_jsn_pixels is None:
            return None
        return abs(r.jsn_pixels - float(t.truth_jsn_pixels))

    pair_rows, records = [], []
    for t, r, b in zip(tasks, outcome.results, base):
        pair_rows.append([t.pair_id, t.truth_jsn_pixels,
                          None if r is None else r.jsn_pixels, None if r is None else int(r.mismatch),
                          None if b is None else b.jsn_pixels, None if b is None else int(b.mismatch)])
        records.append(_record("bench", run, {"pair_id": t.pair_id, "fixed": t.fixed.identity,
                                              "moving": t.moving.identity},
                               {"optimizer": None if r is None else r.to_dict(),
                                "baseline": None if b is None else b.to_dict()}, t0))

    def table_row(name, results, sig, sp):
        n = len(tasks)
        mism = sum(1 for r in results if r is None or r.mismatch) / n
        errs = [e for e in (err(r, t) for r, t in zip(results, tasks)) if e is not None]
        spm = float(np.mean(sp)) if sp else None
        return [name, sig, None if sig is None else sig * res_mm, spm, None if spm is None else spm * res_mm,
                mism, float(np.mean(errs)) if errs else None, n]

    table = [table_row("optimizer", outcome.results, sig_opt, sp_opt),
             table_row("phase_correlation", base, sig_base, sp_base)]
    header = ["method", "sigma_px", "sigma_mm", "sigma_prime_px", "sigma_prime_mm", "mismatch_ratio",
              "mean_abs_jsn_error_px", "n_pairs"]
    write_csv(args.out, header, table)
    if args.out is not None:
        stem = Path(args.out).with_suffix("")
        write_csv(f"{stem}_pairs.csv", ["pair_id", "truth_jsn_px", "optimizer_jsn_px", "optimizer_mismatch",
                                        "baseline_jsn_px", "baseline_mismatch"], pair_rows)
        Path(f"{stem}_records.jsonl").write_text("", encoding="utf-8")
        emit_records(records, f"{stem}_records.jsonl")
    return EXIT_MISMATCH if outcome.record.mismatch_ratio > 0 else EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--out", help="output file (records, table or mask) or folder for `phantom`")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--resolution-mm", type=float, help="mm per pixel, overrides image metadata")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="jsnreg", description="Two-region rigid registration for joint space narrowing.")
    p.add_argument("--version", action="version", version=f"jsnreg {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def pair_args(sp):
        for name in ("fixed", "moving", "fixed_mask", "moving_mask"):
            sp.add_argument(name)

    sp = sub.add_parser("register", parents=[common], help="register one image pair")
    pair_args(sp)
    sp.add_argument("--emit-spectra", action="store_true", help="write original and warped loss heatmaps")
    sp.add_argument("--emit-warped", action="store_true", help="write the warped moving image")
    sp.set_defaults(func=cmd_register)

    sp = sub.add_parser("series", parents=[common], help="pairwise JSN and sigma over a time series")
    sp.add_argument("manifest")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--records", help="also append per-pair JSON records here")
    sp.set_defaults(func=cmd_series)

    sp = sub.add_parser("sigma-prime", parents=[common], help="JSN spread under random moving-image shifts")
    pair_args(sp)
    sp.add_argument("--perturbations", type=int, default=10)
    sp.set_defaults(func=cmd_sigma_prime)

    sp = sub.add_parser("phantom", parents=[common], help="render a phantom pair from a spec file")
    sp.add_argument("spec")
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("segment", parents=[common], help="heuristic two-bone segmentation")
    sp.add_argument("image")
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("seg-metrics", parents=[common], help="mIoU, SEN, SPC, DSC and ACC of a mask")
    sp.add_argument("predicted")
    sp.add_argument("truth")
    sp.set_defaults(func=cmd_seg_metrics)

    sp = sub.add_parser("bench", parents=[common], help="optimizer vs phase-correlation comparison table")
    sp.add_argument("manifest")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--perturbations", type=int, default=10, help="shifts per pair for sigma' (0 skips)")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("spectrum", parents=[common], help="render the loss spectrum of two images")
    sp.add_argument("fixed")
    sp.add_argument("moving")
    sp.add_argument("--records", help="append a JSON record here")
    sp.set_defaults(func=cmd_spectrum)
    return p


def _run_config(args) -> RunConfig:
    run = load_run_config(args.config)
    over = {"rng_seed": args.seed, "resolution_mm_per_px": args.resolution_mm}
    if getattr(args, "emit_spectra", False):
        over["emit_spectra"] = True
    if getattr(args, "emit_warped", False):
        over["emit_warped"] = True
    return run.with_overrides(**over)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_ERROR
    try:
        run = _run_config(args)
        return args.func(args, run)
    except (UsageError, ConfigError, ImageFormatError, PhantomError, SegmentationError,
            EvaluationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
