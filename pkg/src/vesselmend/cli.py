"""Command-line pipeline driver.

Subcommands: ``reconnect`` (stitch or remove disconnected fragments),
``reconstruct`` (implicit tube surfaces over stitched centerlines),
``metrics`` (mask/centerline quality report), ``phantom`` (synthetic
case generation), and ``stats adf`` (unit-root tests on plain series).

Every report path writes JSON plus CSV tables and PNG figures into the
output directory. Logs are line-oriented JSON on stderr (``--quiet``
silences them). Exit codes: 0 success, 2 input error, 3 internal
invariant violation. ``--threads`` caps internal parallelism; all
current stages are sequential, so any cap yields identical output.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import reporting
from .config import ConfigError, PipelineConfig, load_config, save_config
from .grid import (
    Connectivity,
    DimMismatchError,
    EmptyMaskError,
    Volume,
    VolumeKind,
    connected_components,
)
from .ies import build_tube_model, export_stl, merge, voxelize
from .lumen import contour_pipeline, sdf_oracle_default
from .oracle import IntensityPercentileOracle, LinearPatchOracle
from .phantom import (
    SpecInvalidError,
    generate,
    save_case,
    spec_from_dict,
    standard_suite_specs,
)
from .reconnect import run_reconnection
from .skeleton import load_branches, skeletonize_hard
from .stats import ConstantSeriesError, SeriesTooShortError, adf_test
from .topometrics import (
    ReconnectionCounts,
    dice,
    hd95,
    joint_loss,
    nsdt_soft_cldice,
    overlap_ov,
    rec_metrics,
)
from .volume_io import (
    HeaderCorruptError,
    SizeMismatchError,
    UnsupportedDatatypeError,
    load_volume,
    save_volume,
)

__all__ = ["main"]

_INPUT_ERRORS = (
    FileNotFoundError,
    IsADirectoryError,
    NotADirectoryError,
    PermissionError,
    ConfigError,
    SpecInvalidError,
    UnsupportedDatatypeError,
    HeaderCorruptError,
    SizeMismatchError,
    DimMismatchError,
    json.JSONDecodeError,
)


class _Log:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def __call__(self, event: str, **kw) -> None:
        if not self.quiet:
            print(json.dumps({"event": event, **kw}, sort_keys=True), file=sys.stderr)


def _load_cfg(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    overrides = {
        "threads": args.threads,
        "seed": args.seed,
        "walk.omega": getattr(args, "omega", None),
        "walk.neighbor_level": getattr(args, "neighbor_level", None),
        "walk.accept_threshold": getattr(args, "accept_threshold", None),
        "nsdt_amplification": getattr(args, "nsdt_radius", None),
        "loss_alpha": getattr(args, "alpha", None),
        "oracle.kind": getattr(args, "oracle", None),
        "oracle.seed": getattr(args, "oracle_seed", None),
        "lumen.ray_policy": getattr(args, "rays", None),
    }
    if getattr(args, "types", None):
        overrides["enabled_types"] = tuple(int(t) for t in args.types.split(","))
    return cfg.with_overrides(overrides)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fit_oracle(cfg: PipelineConfig, vol: Volume, mask: Volume):
    if cfg.oracle.kind == "intensity_percentile":
        return IntensityPercentileOracle()
    skel = skeletonize_hard(mask)
    model = LinearPatchOracle(
        big=cfg.oracle.patch_big,
        small=cfg.oracle.patch_small,
        epochs=cfg.oracle.epochs,
        learning_rate=cfg.oracle.learning_rate,
        l2=cfg.oracle.l2,
    )
    return model.fit(vol, mask.foreground(), skel.mask.foreground(), seed=cfg.oracle.seed)


def _save_like(vol: Volume, reference: str, out: Path, stem: str) -> Path:
    ext = ".nii" if reference.endswith(".nii") else ".json"
    return save_volume(vol, out / f"{stem}{ext}")


def _write_centerlines(paths: list[np.ndarray], path: Path) -> Path:
    with path.open("w") as fh:
        for pts in paths:
            fh.write(json.dumps({"points": np.asarray(pts).astype(int).tolist()}) + "\n")
    return path


def _read_centerlines(path: Path) -> list[np.ndarray]:
    out = []
    for line in path.read_text().splitlines():
        if line.strip():
            out.append(np.asarray(json.loads(line)["points"], dtype=np.float64))
    return out


# -- subcommands -------------------------------------------------------


def cmd_reconnect(args, log: _Log) -> int:
    cfg = _load_cfg(args)
    vol = load_volume(args.volume)
    mask = load_volume(args.mask, kind=VolumeKind.BINARY_MASK)
    gt = load_volume(args.gt_mask, kind=VolumeKind.BINARY_MASK) if args.gt_mask else None
    out = _out_dir(args)
    oracle = _fit_oracle(cfg, vol, mask)
    log("reconnect.start", volume=str(args.volume), mask=str(args.mask),
        omega=cfg.walk.omega, types=list(cfg.enabled_types))
    outcome = run_reconnection(
        mask,
        vol,
        oracle=oracle,
        candidate_params=cfg.candidates,
        walk_params=cfg.walk,
        enabled_types=cfg.enabled_types,
        opening_patch=cfg.opening_patch,
        gt_mask=gt,
        oracle_seed=cfg.oracle.seed,
    )
    refined_path = _save_like(outcome.refined_mask, args.mask, out, "refined_mask")
    lines_path = _write_centerlines(outcome.stitched_centerlines, out / "stitched_centerlines.jsonl")
    (out / "report.json").write_text(json.dumps(outcome.report, indent=2, sort_keys=True) + "\n")
    save_config(cfg, out / "config_used.json")
    reporting.write_pairs_csv(outcome.report["pairs"], out / "pairs.csv")
    stitched = (
        np.concatenate(outcome.stitched_centerlines)
        if outcome.stitched_centerlines
        else np.zeros((0, 3))
    )
    reporting.save_mip_figure(
        vol, out / "reconnect_mip.png",
        masks={"input": mask, "refined": outcome.refined_mask},
        points={"stitched": stitched},
        title="reconnection",
    )
    reporting.save_pair_score_figure(outcome.report["pairs"], out / "reconnect_scores.png")
    log("reconnect.done", accepted=outcome.report["accepted"],
        fragments=outcome.report["fragments"],
        removed=outcome.report["removed_components"],
        refined=str(refined_path), centerlines=str(lines_path))
    return 0


def cmd_reconstruct(args, log: _Log) -> int:
    cfg = _load_cfg(args)
    vol = load_volume(args.volume)
    refined = load_volume(args.refined_mask, kind=VolumeKind.BINARY_MASK)
    refined.same_grid(vol)
    stitches = _read_centerlines(Path(args.stitches)) if args.stitches else []
    out = _out_dir(args)
    log("reconstruct.start", stitches=len(stitches))
    final = refined
    sdf_oracle = sdf_oracle_default()
    all_stations = []
    for i, pts in enumerate(stitches):
        if len(pts) < cfg.reconstruct.min_stations:
            log("reconstruct.skip", stitch=i, points=len(pts))
            continue
        stations = contour_pipeline(
            pts, vol, oracle=sdf_oracle,
            n_policy=cfg.lumen.ray_policy,
            size=cfg.lumen.section_size,
            pixel_spacing=cfg.lumen.pixel_spacing,
        )
        model = build_tube_model(
            stations, vol.spacing, support_scale=cfg.reconstruct.support_scale
        )
        tube = voxelize(model, vol.dims, vol.spacing, iso=cfg.reconstruct.iso)
        final = merge(tube, final)
        all_stations.extend(stations)
        reporting.save_station_radius_figure(
            stations, out / f"stitch_{i}_radii.png"
        )
        if args.stl:
            export_stl(model, vol.dims, vol.spacing, out / f"stitch_{i}.stl",
                       iso=cfg.reconstruct.iso)
        log("reconstruct.stitch", stitch=i, stations=len(stations))
    final_path = _save_like(final, args.refined_mask, out, "final_mask")
    save_config(cfg, out / "config_used.json")
    if all_stations:
        reporting.write_stations_csv(all_stations, out / "stations.csv")
    reporting.save_mip_figure(
        vol, out / "reconstruct_mip.png",
        masks={"refined": refined, "final": final},
        title="reconstruction",
    )
    comps = connected_components(final, Connectivity.FULL)
    log("reconstruct.done", final=str(final_path), components=int(comps.count))
    return 0


def _metrics_report(args, cfg: PipelineConfig) -> dict:
    pred = load_volume(args.pred, kind=VolumeKind.BINARY_MASK)
    gt = load_volume(args.gt, kind=VolumeKind.BINARY_MASK)
    gt.same_grid(pred)
    report: dict = {
        "dice": dice(pred, gt),
        "hd95_mm": None,
        "ov": None,
        "rec_acc": None,
        "rec_sen": None,
        "rec_spe": None,
        "l_dscl": None,
        "joint_loss": None,
    }
    try:
        report["hd95_mm"] = hd95(pred, gt)
    except EmptyMaskError:
        pass
    try:
        report["l_dscl"] = nsdt_soft_cldice(gt, pred, soft_iterations=cfg.soft_skeleton_iterations)
        report["joint_loss"] = joint_loss(gt, pred, alpha=cfg.loss_alpha,
                                          soft_iterations=cfg.soft_skeleton_iterations)
    except EmptyMaskError:
        pass
    if args.pred_centerlines and args.gt_centerlines:
        ext = np.concatenate([b.points for b in load_branches(args.pred_centerlines)])
        ref = np.concatenate([b.points for b in load_branches(args.gt_centerlines)])
        report["ov"] = overlap_ov(ref, ext)
    if args.reconnect_report:
        rep = json.loads(Path(args.reconnect_report).read_text())
        if "counts" in rep:
            rm = rec_metrics(ReconnectionCounts(**rep["counts"]))
            report["rec_acc"] = rm.accuracy
            report["rec_sen"] = None if np.isnan(rm.sensitivity) else rm.sensitivity
            report["rec_spe"] = None if np.isnan(rm.specificity) else rm.specificity
    return report


def cmd_metrics(args, log: _Log) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args)
    report = _metrics_report(args, cfg)
    (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    reporting.write_metrics_csv(report, out / "metrics.csv")
    reporting.save_metric_figure(report, out / "metrics.png")
    log("metrics.done", **{k: v for k, v in report.items() if v is not None})
    return 0


def cmd_phantom(args, log: _Log) -> int:
    out = _out_dir(args)
    if args.suite:
        specs = standard_suite_specs()
    else:
        if not args.spec:
            raise ConfigError("phantom needs --suite or --spec FILE")
        specs = [spec_from_dict(json.loads(Path(args.spec).read_text()))]
    rows = []
    mips = []
    for spec in specs:
        case = generate(spec)
        case_dir = save_case(case, out / case.name)
        comps = connected_components(case.broken_mask, Connectivity.FULL)
        rows.append({
            "name": case.name,
            "seed": spec.seed,
            "dims": "x".join(str(d) for d in spec.dims),
            "branches": len(spec.branches),
            "breaks": len(spec.breaks),
            "decoys": len(spec.decoys),
            "components": int(comps.count),
        })
        mips.append((case.name, case.broken_mask))
        log("phantom.case", name=case.name, dir=str(case_dir),
            components=int(comps.count))
    reporting.write_suite_csv(rows, out / "cases.csv")
    import matplotlib.pyplot as plt

    cols = min(5, len(mips))
    rows_n = (len(mips) + cols - 1) // cols
    fig, axes = plt.subplots(rows_n, cols, figsize=(3 * cols, 3 * rows_n), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, (name, m) in zip(axes.ravel(), mips):
        ax.imshow(m.data.max(axis=2).T, origin="lower", cmap="gray")
        ax.set_title(name, fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "suite_mip.png", dpi=110)
    plt.close(fig)
    log("phantom.done", cases=len(rows), out=str(out))
    return 0


def cmd_stats_adf(args, log: _Log) -> int:
    text = sys.stdin.read() if args.input == "-" else Path(args.input).read_text()
    rows = []
    for i, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        series = np.array([float(v) for v in line.replace(",", " ").split()])
        try:
            r = adf_test(series, max_lags=args.maxlag)
        except (SeriesTooShortError, ConstantSeriesError) as exc:
            raise SpecInvalidError(f"series {i}: {exc}") from exc
        rows.append({
            "series": i,
            "n": r.n_obs,
            "lags": r.lags,
            "statistic": r.statistic,
            "pvalue": r.p_value,
        })
        log("stats.adf", **rows[-1])
    if not rows:
        raise SpecInvalidError(f"{args.input}: no series found")
    out = _out_dir(args)
    (out / "adf.json").write_text(json.dumps(rows, indent=2) + "\n")
    reporting.write_adf_csv(rows, out / "adf.csv")
    reporting.save_adf_figure(rows, out / "adf.png")
    return 0


# -- argument wiring ---------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="pipeline config JSON; flags override it")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=None,
                   help="parallelism cap (stages are sequential; output is identical for any cap)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--quiet", action="store_true", help="suppress JSON logs")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vesselmend",
                                 description="vessel-tree mask repair pipeline")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("reconnect", help="stitch or remove disconnected fragments")
    p.add_argument("--volume", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--gt-mask", default=None, help="optional truth mask for decision tallies")
    p.add_argument("--omega", type=float, default=None, help="vesselness weight in the walk score")
    p.add_argument("--neighbor-level", choices=("auto", "first", "second"), default=None)
    p.add_argument("--accept-threshold", type=float, default=None)
    p.add_argument("--types", default=None, help="comma list of enabled passes, e.g. 1,2,3")
    p.add_argument("--oracle", choices=("linear_patch", "intensity_percentile"), default=None)
    p.add_argument("--oracle-seed", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_reconnect)

    p = sub.add_parser("reconstruct", help="implicit tube surfaces over stitched centerlines")
    p.add_argument("--volume", required=True)
    p.add_argument("--refined-mask", required=True)
    p.add_argument("--stitches", default=None, help="stitched_centerlines.jsonl from reconnect")
    p.add_argument("--rays", type=int, default=None, help="rays per cross-section contour")
    p.add_argument("--stl", action="store_true", help="also export binary STL per stitch")
    _add_common(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("metrics", help="mask and centerline quality report")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--pred-centerlines", default=None, help="branches JSONL for overlap")
    p.add_argument("--gt-centerlines", default=None)
    p.add_argument("--reconnect-report", default=None,
                   help="report.json with decision counts for Rec* metrics")
    p.add_argument("--alpha", type=float, default=None, help="joint-loss blend weight")
    p.add_argument("--nsdt-radius", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("phantom", help="generate synthetic cases with ground truth")
    p.add_argument("--suite", action="store_true", help="write the standard verification suite")
    p.add_argument("--spec", default=None, help="single case spec JSON")
    _add_common(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("stats", help="statistical utilities")
    stats_sub = p.add_subparsers(dest="stats_cmd", required=True)
    q = stats_sub.add_parser("adf", help="unit-root test, one series per input line")
    q.add_argument("--input", required=True, help="text file of series ('-' for stdin)")
    q.add_argument("--maxlag", type=int, default=None)
    _add_common(q)
    q.set_defaults(func=cmd_stats_adf)

    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    log = _Log(quiet=args.quiet)
    try:
        return args.func(args, log)
    except _INPUT_ERRORS as exc:
        print(json.dumps({"event": "error", "kind": "input", "detail": str(exc)}),
              file=sys.stderr)
        return 2
    except Exception as exc:  # internal invariant violation
        print(json.dumps({"event": "error", "kind": "internal",
                          "type": type(exc).__name__, "detail": str(exc)}),
              file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
