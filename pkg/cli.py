"""
Command line entry point for the slice pose pipeline.

Subcommands: phantom, gen-dataset, build-dict, predict, evaluate,
reconstruct and replay. Results are JSON lines on stdout (or --out);
logs go to stderr.
"""

import argparse
import glob
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from liegroup import MetricWeights
from metrics import evaluate_pose, summarize_reports
from phantoms import PHANTOM_KINDS, make_phantom
from pipeline_utils import PipelineError, default_log_level, default_threads, log_event, logger, run_ordered
from predictor import (
    DEFAULT_DESCRIPTOR_SIZE,
    DEFAULT_MC_SAMPLES,
    DEFAULT_TEMPERATURE,
    DEFAULT_TOP_K,
    DEFAULT_VARIANCE_THRESHOLD,
    DictionaryPredictor,
    PredictionSet,
    build_dictionary,
    load_dictionary,
    mc_aggregate,
    save_dictionary,
)
from recon import PSF, ReconConfig, psnr_over_mask, svr_refine
from sampler import SamplingConfig, generate_dataset, read_manifest, row_transform, write_jsonl
from se3core import RigidTransform, anchor_points_from_transform, to_euler, to_quaternion
from volume import Volume, load_slice, load_volume, minmax_rescale, percentile_clip, save_volume

SCHEME_ALIASES = {"euler": "euler-grid", "polar": "uniform-polar"}


@dataclass
class RunConfig:
    command: str
    args: Dict[str, Any] = field(default_factory=dict)
    seed: int = 0
    threads: int = 1
    log_level: str = "INFO"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise PipelineError("invalid_config", "Unreadable run configuration", detail=str(exc)) from exc


def _json_safe(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {key: _json_safe(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(item) for item in value]
    if isinstance(value, np.generic):
        return _json_safe(value.item())
    return value


def _emit(rows: Sequence[Dict[str, Any]], out: Optional[str]) -> None:
    rows = [_json_safe(row) for row in rows]
    if out:
        write_jsonl(out, rows)
        return
    for row in rows:
        sys.stdout.write(json.dumps(row, sort_keys=True) + "\n")
    sys.stdout.flush()


def _pose_labels(t: RigidTransform, anchor_scale: float) -> Dict[str, Any]:
    return {
        "euler": to_euler(t).to_dict(),
        "quaternion": to_quaternion(t).to_dict(),
        "anchors": anchor_points_from_transform(t, anchor_scale).to_dict(),
        "anchor_scale": anchor_scale,
    }


def _resolve(path: str, base_dir: str) -> str:
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


def _rejected(row: Dict[str, Any]) -> bool:
    value = row.get("accepted")
    return isinstance(value, (bool, np.bool_)) and not bool(value)


def _prepared_volume(args: argparse.Namespace) -> Volume:
    volume = load_volume(args.volume)
    if args.clip:
        volume = percentile_clip(volume, args.clip[0], args.clip[1])
    if args.rescale:
        volume = minmax_rescale(volume, 0.0, 255.0)
    return volume


def _sampling_config(args: argparse.Namespace) -> SamplingConfig:
    tz_min, tz_max, tz_step = args.tz
    return SamplingConfig(
        scheme=SCHEME_ALIASES.get(args.scheme, args.scheme),
        angle_step=math.radians(args.step),
        n_normals=args.n_normals,
        n_inplane=args.n_inplane,
        n_phi=args.n_phi,
        n_theta=args.n_theta,
        n_random=args.n_random,
        hemisphere=args.hemisphere,
        tz_min=tz_min,
        tz_max=tz_max,
        tz_step=tz_step,
        seed=args.seed,
        slice_size=args.slice_size,
        slice_spacing=args.slice_spacing,
        anchor_scale=args.anchor_scale,
        min_content=args.min_content,
    )


def cmd_phantom(args: argparse.Namespace) -> int:
    volume = make_phantom(args.kind, args.dims, args.spacing, args.seed)
    save_volume(volume, args.out, dtype=args.dtype)
    _emit([{"id": "phantom", "kind": args.kind, "dims": list(volume.dims), "spacing": volume.spacing, "out": args.out}], None)
    return 0


def cmd_gen_dataset(args: argparse.Namespace) -> int:
    volume = _prepared_volume(args)
    cfg = _sampling_config(args)
    rows = generate_dataset(volume, cfg, args.out_dir, args.manifest_name, threads=args.threads, png=args.png)
    manifest = os.path.join(args.out_dir, args.manifest_name)
    _emit([{"id": "summary", "rows": len(rows), "manifest": manifest, "scheme": cfg.scheme}], None)
    return 0


def cmd_build_dict(args: argparse.Namespace) -> int:
    volume = _prepared_volume(args)
    cfg = _sampling_config(args)
    model = build_dictionary(volume, cfg, args.descriptor_size, args.similarity, threads=args.threads)
    save_dictionary(model, args.model, args.name)
    _emit([{"id": "summary", "entries": len(model), "model": args.model, "name": args.name}], None)
    return 0


def _prediction_inputs(args: argparse.Namespace) -> List[Dict[str, str]]:
    if args.manifest:
        base_dir = os.path.dirname(os.path.abspath(args.manifest))
        frame = read_manifest(args.manifest)
        if "slice" not in frame.columns:
            raise PipelineError("malformed_manifest", "Manifest rows need a slice path", detail=args.manifest)
        return [{"id": str(row["id"]), "path": _resolve(str(row["slice"]), base_dir)} for row in frame.to_dict("records")]
    paths = sorted(glob.glob(os.path.join(args.slices, "*.spv")))
    if not paths:
        raise PipelineError("empty_input", "No SPV1 slices found", detail=args.slices)
    return [{"id": os.path.splitext(os.path.basename(path))[0], "path": path} for path in paths]


def cmd_predict(args: argparse.Namespace) -> int:
    model = load_dictionary(args.model, args.name)
    predictor = DictionaryPredictor(model, top_k=args.top_k, temperature=args.temperature)
    inputs = _prediction_inputs(args)
    out_dir = os.path.dirname(os.path.abspath(args.out)) if args.out else os.getcwd()

    def predict_one(item: tuple) -> Dict[str, Any]:
        index, entry = item
        image = load_slice(entry["path"])
        if args.deterministic:
            try:
                prediction = PredictionSet((), predictor.predict(image), 0.0, True)
            except PipelineError as exc:
                if exc.code != "degenerate_input":
                    raise
                prediction = PredictionSet((), None, math.inf, False, status="degenerate_input")
        else:
            seed = int(np.random.SeedSequence([args.seed, index]).generate_state(1)[0])
            prediction = mc_aggregate(predictor, image, args.mc_samples, args.variance_threshold, seed=seed)
        row: Dict[str, Any] = {
            "id": entry["id"],
            "slice": os.path.relpath(os.path.abspath(entry["path"]), out_dir),
            "variance": prediction.variance,
            "accepted": prediction.accepted,
            "status": prediction.status,
        }
        if prediction.mean is not None:
            row.update(_pose_labels(prediction.mean, model.anchor_scale))
        return row

    rows = run_ordered(predict_one, list(enumerate(inputs)), args.threads)
    accepted = sum(1 for row in rows if row["accepted"])
    log_event("predict_done", slices=len(rows), accepted=accepted, mc_samples=args.mc_samples)
    _emit(rows, args.out)
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    predictions = {str(row["id"]): row for row in read_manifest(args.pred).to_dict("records")}
    truths = read_manifest(args.gt).to_dict("records")
    volume = load_volume(args.volume) if args.volume else None
    weights = MetricWeights(args.w_rot, args.w_trans).validate()

    reports = []
    for truth in truths:
        key = str(truth["id"])
        pred = predictions.get(key)
        if pred is None or not isinstance(pred.get("quaternion"), dict):
            continue
        scale = args.anchor_scale or float(truth.get("anchor_scale") or 1.0)
        reports.append(
            evaluate_pose(
                row_transform(pred),
                row_transform(truth),
                scale,
                volume=volume,
                l=args.slice_size,
                w_rot=weights.w_rot,
                w_trans=weights.w_trans,
                report_id=key,
            )
        )
    if not reports:
        raise PipelineError("empty_input", "No prediction matches a ground-truth id", detail=f"{args.pred} vs {args.gt}")
    rows = [report.to_dict() for report in reports]
    rows.append(summarize_reports(reports, reject_outliers=args.reject_outliers))
    _emit(rows, args.out)
    return 0


def _recon_config(args: argparse.Namespace, pixel_spacing: float) -> ReconConfig:
    dims = tuple(args.grid) if len(args.grid) == 3 else (args.grid[0],) * 3
    return ReconConfig(
        dims=dims,
        spacing=args.spacing,
        psf=PSF.from_geometry(args.psf_thickness, pixel_spacing),
        svr_iterations=args.iters,
        search_rotation=math.radians(args.search_rotation),
        search_translation=args.search_translation,
        robust_rejection=not args.no_robust,
        threads=args.threads,
    ).validate()


def cmd_reconstruct(args: argparse.Namespace) -> int:
    base_dir = os.path.dirname(os.path.abspath(args.manifest))
    rows = read_manifest(args.manifest).to_dict("records")
    slices, poses, ids = [], [], []
    skipped = 0
    for row in rows:
        if _rejected(row) or not isinstance(row.get("quaternion"), dict):
            skipped += 1
            continue
        slices.append(load_slice(_resolve(str(row["slice"]), base_dir)))
        poses.append(row_transform(row))
        ids.append(str(row["id"]))
    if not slices:
        raise PipelineError("empty_input", "No accepted slices to reconstruct", detail=args.manifest)

    cfg = _recon_config(args, slices[0].spacing)
    result = svr_refine(slices, poses, cfg)
    recon = result.reconstruction
    save_volume(recon.volume, args.out, dtype="f32")
    if args.coverage_out:
        save_volume(Volume(recon.coverage.astype(np.float64), cfg.spacing, "u8"), args.coverage_out)
    if args.poses_out:
        scale = float(rows[0].get("anchor_scale") or 1.0)
        _emit([{"id": key, **_pose_labels(pose, scale)} for key, pose in zip(ids, result.poses)], args.poses_out)

    summary: Dict[str, Any] = {
        "id": "summary",
        "slices": len(slices),
        "skipped": skipped,
        "covered_fraction": recon.covered_fraction,
        "history": list(result.history),
    }
    if args.reference:
        reference = load_volume(args.reference)
        mask = recon.coverage & (reference.data > 0)
        value = psnr_over_mask(recon.volume, reference, mask)
        summary["psnr"] = value
        if math.isinf(value):
            summary["identical"] = True
    _emit([summary], None)
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    try:
        with open(args.config, "r", encoding="utf-8") as handle:
            config = RunConfig.from_json(handle.read())
    except OSError as exc:
        raise PipelineError("missing_file", "Unable to read run configuration", detail=f"{args.config}: {exc}") from exc
    if config.command not in COMMANDS or config.command == "replay":
        raise PipelineError("invalid_config", "Run configuration names no replayable command", detail=config.command)
    replayed = argparse.Namespace(**config.args)
    replayed.seed = config.seed
    replayed.threads = args.threads if args.threads_given else config.threads
    replayed.save_config = None
    log_event("replay_start", command=config.command, config_file=args.config)
    return COMMANDS[config.command](replayed)


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "phantom": cmd_phantom,
    "gen-dataset": cmd_gen_dataset,
    "build-dict": cmd_build_dict,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "reconstruct": cmd_reconstruct,
    "replay": cmd_replay,
}


def _add_volume_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--volume", required=True, help="input SPV1 volume")
    parser.add_argument("--rescale", action="store_true", help="min-max rescale intensities to 0-255 first")
    parser.add_argument("--clip", nargs=2, type=float, metavar=("LOW", "HIGH"), help="percentile clip, fractions in [0, 1]")


def _add_sampling_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--scheme", default="euler", choices=["identity", "euler", "euler-grid", "fibonacci", "polar", "uniform-polar", "random"],
        help="pose sampling scheme",
    )
    parser.add_argument("--step", type=float, default=18.0, help="Euler grid angle step (degrees)")
    parser.add_argument(
        "--tz", nargs=3, type=float, default=[-8.0, 8.0, 4.0], metavar=("MIN", "MAX", "STEP"),
        help="tz offsets along the slice normal, half-open [MIN, MAX) (mm)",
    )
    parser.add_argument("--n-normals", type=int, default=300, help="Fibonacci normal count")
    parser.add_argument("--n-inplane", type=int, default=10, help="in-plane angles over [0, 180) degrees (count)")
    parser.add_argument("--n-phi", type=int, default=20, help="polar grid azimuth count")
    parser.add_argument("--n-theta", type=int, default=15, help="polar grid inclination count")
    parser.add_argument("--n-random", type=int, default=500, help="random validation pose count")
    parser.add_argument("--hemisphere", action="store_true", help="Fibonacci normals on one hemisphere")
    parser.add_argument("--slice-size", type=int, default=None, help="slice side (pixels; default: largest volume dim)")
    parser.add_argument("--slice-spacing", type=float, default=None, help="slice pixel spacing (mm; default: voxel spacing)")
    parser.add_argument("--anchor-scale", type=float, default=None, help="anchor point scale l (mm; default: slice side)")
    parser.add_argument("--min-content", type=float, default=0.05, help="minimum nonzero pixel fraction (0-1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="svr-pose", description="Slice pose sampling, prediction and reconstruction.")
    parser.add_argument("--seed", type=int, default=0, help="random seed (integer)")
    parser.add_argument("--threads", type=int, default=None, help="worker threads (count; default SVR_POSE_THREADS or 1)")
    parser.add_argument("--log-level", default=None, help="logging level (default SVR_POSE_LOG_LEVEL or INFO)")
    parser.add_argument("--save-config", default=None, help="write the run configuration as JSON to this file")
    sub = parser.add_subparsers(dest="command", required=True)

    phantom = sub.add_parser("phantom", help="write a synthetic phantom volume")
    phantom.add_argument("--kind", choices=PHANTOM_KINDS, default="blobs", help="phantom type")
    phantom.add_argument("--dims", type=int, default=64, help="voxels per axis (count)")
    phantom.add_argument("--spacing", type=float, default=1.0, help="voxel spacing (mm)")
    phantom.add_argument("--dtype", choices=["f32", "u8"], default="f32", help="SPV1 scalar type")
    phantom.add_argument("--out", required=True, help="output SPV1 volume")

    gen = sub.add_parser("gen-dataset", help="sample slices and write a labelled manifest")
    _add_volume_flags(gen)
    _add_sampling_flags(gen)
    gen.add_argument("--out-dir", required=True, help="directory for slices and manifest")
    gen.add_argument("--manifest-name", default="manifest.jsonl", help="manifest file name inside --out-dir")
    gen.add_argument("--png", action="store_true", help="also write 8-bit PNG previews")

    build = sub.add_parser("build-dict", help="build and store a dictionary pose model")
    _add_volume_flags(build)
    _add_sampling_flags(build)
    build.add_argument("--descriptor-size", type=int, default=DEFAULT_DESCRIPTOR_SIZE, help="descriptor side (pixels)")
    build.add_argument("--similarity", choices=["cc", "ssim"], default="cc", help="descriptor similarity")
    build.add_argument("--model", required=True, help="SQLite model store file or database URL")
    build.add_argument("--name", default="default", help="model name inside the store")

    predict = sub.add_parser("predict", help="predict slice poses with a dictionary model")
    source = predict.add_mutually_exclusive_group(required=True)
    source.add_argument("--manifest", help="manifest listing the slices")
    source.add_argument("--slices", help="directory of SPV1 slices")
    predict.add_argument("--model", required=True, help="SQLite model store file or database URL")
    predict.add_argument("--name", default="default", help="model name inside the store")
    predict.add_argument("--mc-samples", type=int, default=DEFAULT_MC_SAMPLES, help="Monte Carlo predictions per slice (count)")
    predict.add_argument(
        "--variance-threshold", type=float, default=DEFAULT_VARIANCE_THRESHOLD,
        help="maximum geodesic variance to accept (squared metric units)",
    )
    predict.add_argument("--top-k", type=int, default=DEFAULT_TOP_K, help="stochastic candidate pool (count)")
    predict.add_argument("--temperature", type=float, default=DEFAULT_TEMPERATURE, help="softmax temperature (similarity units)")
    predict.add_argument("--deterministic", action="store_true", help="single best match, no Monte Carlo sampling")
    predict.add_argument("--out", default=None, help="output JSON-lines file (default stdout)")

    evaluate = sub.add_parser("evaluate", help="compare predicted and ground-truth poses")
    evaluate.add_argument("--pred", required=True, help="predictions JSON-lines")
    evaluate.add_argument("--gt", required=True, help="ground-truth manifest JSON-lines")
    evaluate.add_argument("--volume", default=None, help="SPV1 volume for image metrics")
    evaluate.add_argument("--slice-size", type=int, default=None, help="slice side for image metrics (pixels)")
    evaluate.add_argument("--anchor-scale", type=float, default=None, help="anchor point scale l (mm; default from manifest)")
    evaluate.add_argument("--w-rot", type=float, default=MetricWeights.from_env().w_rot, help="geodesic rotation weight (1/rad^2)")
    evaluate.add_argument("--w-trans", type=float, default=MetricWeights.from_env().w_trans, help="geodesic translation weight (1/mm^2)")
    evaluate.add_argument("--reject-outliers", action="store_true", help="MAD-reject gross geodesic errors in the summary")
    evaluate.add_argument("--out", default=None, help="output JSON-lines file (default stdout)")

    recon = sub.add_parser("reconstruct", help="reconstruct a volume from posed slices")
    recon.add_argument("--manifest", required=True, help="slices with poses (predicted or ground truth)")
    recon.add_argument("--grid", nargs="+", type=int, default=[64], help="grid dims: N or NX NY NZ (voxels)")
    recon.add_argument("--spacing", type=float, default=1.0, help="grid spacing (mm)")
    recon.add_argument("--psf-thickness", type=float, default=2.0, help="slice thickness, PSF FWHM through-plane (mm)")
    recon.add_argument("--iters", type=int, default=0, help="SVR refinement rounds (count; 0 = Gaussian average)")
    recon.add_argument("--search-rotation", type=float, default=20.0, help="registration rotation radius (degrees)")
    recon.add_argument("--search-translation", type=float, default=8.0, help="registration translation radius (mm)")
    recon.add_argument("--no-robust", action="store_true", help="disable MAD rejection of poorly matching slices")
    recon.add_argument("--reference", default=None, help="reference SPV1 volume for PSNR")
    recon.add_argument("--out", required=True, help="output SPV1 volume")
    recon.add_argument("--coverage-out", default=None, help="output SPV1 u8 coverage mask")
    recon.add_argument("--poses-out", default=None, help="output JSON-lines of refined poses")

    replay = sub.add_parser("replay", help="re-run a saved run configuration")
    replay.add_argument("--config", required=True, help="run configuration JSON written by --save-config")
    return parser


def _save_run_config(args: argparse.Namespace) -> None:
    values = {key: value for key, value in vars(args).items() if key not in ("save_config", "command", "seed", "threads", "log_level", "threads_given")}
    config = RunConfig(args.command, values, args.seed, args.threads, args.log_level)
    try:
        with open(args.save_config, "w", encoding="utf-8") as handle:
            handle.write(config.to_json() + "\n")
    except OSError as exc:
        raise PipelineError("unwritable_output", "Unable to write run configuration", detail=f"{args.save_config}: {exc}") from exc


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.threads_given = args.threads is not None
    args.threads = max(1, args.threads) if args.threads is not None else default_threads()
    args.log_level = (args.log_level or default_log_level()).upper()
    logging.basicConfig(
        level=getattr(logging, args.log_level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s %(message)s",
        stream=sys.stderr,
    )

    try:
        if args.save_config and args.command != "replay":
            _save_run_config(args)
        code = COMMANDS[args.command](args)
    except PipelineError as exc:
        log_event("cli_failed", command=args.command, code=exc.code)
        logger.error("%s", exc)
        sys.stderr.write(f"error: {exc}\n")
        return 1
    log_event("cli_done", command=args.command)
    return code


if __name__ == "__main__":
    sys.exit(main())
