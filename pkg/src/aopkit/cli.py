"""Command line interface.

Subcommands: measure, adapt, eval, phantom, render.  Exit codes:
0 success, 1 I/O or format problems, 2 geometric failure, 3 pairing
failure in eval, 64 usage errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import metrics, phantom
from .errors import AopKitError, FormatError, InvalidInput
from .geometry import compute_aop
from .raster import (
    ConfMap,
    LabelMask,
    LogitMap,
    PixelSpacing,
    argmax_labels,
    read_f32r,
    read_mask_pgm,
)
from .tta import AdaptParams, TtaConfig, adapt, apply_head
from .viz import render_svg

EXIT_OK = 0
EXIT_IO = 1
EXIT_GEOMETRY = 2
EXIT_PAIRING = 3
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="aopkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("measure", help="measure the angle from a mask and confidence map")
    p.add_argument("mask", type=Path)
    p.add_argument("conf", type=Path)
    p.add_argument("--spacing", type=float, default=1.0, metavar="MM")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("adapt", help="test-time adapt the logit head, then measure")
    p.add_argument("logits", type=Path)
    p.add_argument("conf", type=Path)
    p.add_argument("--spacing", type=float, default=1.0, metavar="MM")
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lambda-ent", type=float, default=1.0)
    p.add_argument("--lambda-tv", type=float, default=1.0)
    p.add_argument("--lambda-aop", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--fd-step", type=float, default=1e-4)
    p.add_argument("--out", type=Path)
    p.add_argument("--trace-out", type=Path, help="write the step trace as JSON lines")

    p = sub.add_parser("eval", help="segmentation and angle metrics over paired cases")
    p.add_argument("pred_dir", type=Path)
    p.add_argument("gt_dir", type=Path)
    p.add_argument("--spacing", default="1.0", metavar="MM[,MM]")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("phantom", help="generate a seeded phantom suite")
    p.add_argument("out_dir", type=Path)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--corrupt",
        choices=("none", "logit_noise", "logit_bias", "boundary_erosion"),
        default="none",
    )
    p.add_argument("--sigma", type=float, default=1.5)
    p.add_argument("--class-id", type=int, default=2)
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--iterations", type=int, default=1)

    p = sub.add_parser("render", help="render a measurement to SVG")
    p.add_argument("mask", type=Path)
    p.add_argument("conf", type=Path)
    p.add_argument("out_svg", type=Path)
    p.add_argument("--spacing", type=float, default=1.0, metavar="MM")
    return parser


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _read_mask(path: Path) -> LabelMask:
    return read_mask_pgm(path.read_bytes())


def _read_conf(path: Path) -> ConfMap:
    raster = read_f32r(path.read_bytes())
    if not isinstance(raster, ConfMap):
        raise FormatError(f"{path} holds {raster.values.shape[0]} channels, expected 1")
    return raster


def _read_logits(path: Path) -> LogitMap:
    raster = read_f32r(path.read_bytes())
    if not isinstance(raster, LogitMap):
        raise FormatError(f"{path} holds a single channel, expected 3")
    return raster


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        out.write_text(text if text.endswith("\n") else text + "\n")


def _error_report(err: AopKitError) -> str:
    return json.dumps(
        {"error": {"type": type(err).__name__, "stage": err.stage, "message": str(err)}},
        indent=2,
        sort_keys=True,
    )


def _fail_io(err: Exception) -> int:
    print(f"aopkit: {err}", file=sys.stderr)
    return EXIT_IO


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_measure(args) -> int:
    try:
        mask = _read_mask(args.mask)
        conf = _read_conf(args.conf)
    except (OSError, FormatError) as err:
        return _fail_io(err)
    spacing = PixelSpacing(args.spacing, args.spacing)
    try:
        result = compute_aop(mask, conf, spacing)
    except AopKitError as err:
        _emit(_error_report(err), args.out)
        return EXIT_GEOMETRY
    _emit(json.dumps(result.to_dict(), indent=2, sort_keys=True), args.out)
    return EXIT_OK


def cmd_adapt(args) -> int:
    try:
        config = TtaConfig(
            lambda_ent=args.lambda_ent,
            lambda_tv=args.lambda_tv,
            lambda_aop=args.lambda_aop,
            lr=args.lr,
            steps=args.steps,
            epsilon=args.epsilon,
            fd_step=args.fd_step,
        )
    except InvalidInput as err:
        print(f"aopkit adapt: {err}", file=sys.stderr)
        return EXIT_USAGE
    try:
        logits = _read_logits(args.logits)
        conf = _read_conf(args.conf)
    except (OSError, FormatError) as err:
        return _fail_io(err)
    spacing = PixelSpacing(args.spacing, args.spacing)

    def measure(lm: LogitMap, params: AdaptParams):
        labels = argmax_labels(apply_head(lm, params))
        try:
            return compute_aop(labels, conf, spacing).to_dict(), None
        except AopKitError as err:
            return None, err

    identity = AdaptParams.identity()
    pre, _ = measure(logits, identity)
    params, trace = adapt(logits, conf, identity, config)
    post, post_err = measure(logits, params)
    payload = {
        "config": {
            "lambda_ent": config.lambda_ent,
            "lambda_tv": config.lambda_tv,
            "lambda_aop": config.lambda_aop,
            "lr": config.lr,
            "steps": config.steps,
            "epsilon": config.epsilon,
            "fd_step": config.fd_step,
        },
        "pre": pre,
        "post": post,
        "params_before": trace.params_before,
        "params_after": trace.params_after,
        "trace": [r.to_dict() for r in trace.records],
    }
    if post_err is not None:
        payload["error"] = {
            "type": type(post_err).__name__,
            "stage": post_err.stage,
            "message": str(post_err),
        }
    try:
        if args.trace_out is not None:
            args.trace_out.write_text(trace.to_jsonl())
        _emit(json.dumps(payload, indent=2, sort_keys=True), args.out)
    except OSError as err:
        return _fail_io(err)
    return EXIT_GEOMETRY if post_err is not None else EXIT_OK


def _scan_cases(root: Path) -> dict[str, Path]:
    """Case id -> mask path; bare .pgm files and case directories both count."""
    cases: dict[str, Path] = {}
    for p in sorted(root.iterdir()):
        if p.is_file() and p.suffix == ".pgm":
            cases[p.stem] = p
        elif p.is_dir() and (p / "mask.pgm").is_file():
            cases[p.name] = p / "mask.pgm"
    return cases


def _case_conf(mask_path: Path, case_id: str) -> Path | None:
    if mask_path.name == "mask.pgm":
        candidate = mask_path.parent / "conf.f32r"
    else:
        candidate = mask_path.with_suffix(".f32r")
    return candidate if candidate.is_file() else None


def _gt_angle(mask_path: Path, mask: LabelMask, conf_path: Path | None, spacing) -> float | None:
    if mask_path.name == "mask.pgm":
        meta_path = mask_path.parent / "meta.json"
        if meta_path.is_file():
            meta = json.loads(meta_path.read_text())
            if "gt_aop_deg" in meta:
                return float(meta["gt_aop_deg"])
    if conf_path is not None:
        try:
            return compute_aop(mask, _read_conf(conf_path), spacing).aop_deg
        except AopKitError:
            return None
    return None


def cmd_eval(args) -> int:
    parts = str(args.spacing).split(",")
    try:
        if len(parts) == 1:
            spacing = PixelSpacing(float(parts[0]), float(parts[0]))
        elif len(parts) == 2:
            spacing = PixelSpacing(float(parts[0]), float(parts[1]))
        else:
            raise ValueError(f"bad spacing {args.spacing!r}")
    except (ValueError, InvalidInput) as err:
        print(f"aopkit eval: {err}", file=sys.stderr)
        return EXIT_USAGE
    try:
        pred_cases = _scan_cases(args.pred_dir)
        gt_cases = _scan_cases(args.gt_dir)
    except OSError as err:
        return _fail_io(err)
    missing_gt = sorted(set(pred_cases) - set(gt_cases))
    missing_pred = sorted(set(gt_cases) - set(pred_cases))
    if missing_gt or missing_pred:
        for cid in missing_gt:
            print(f"aopkit eval: no ground truth for case {cid}", file=sys.stderr)
        for cid in missing_pred:
            print(f"aopkit eval: no prediction for case {cid}", file=sys.stderr)
        return EXIT_PAIRING
    if not pred_cases:
        print("aopkit eval: no cases found", file=sys.stderr)
        return EXIT_PAIRING

    case_ids = sorted(pred_cases)
    rows = []
    iso = PixelSpacing(spacing.row_mm, spacing.row_mm) if spacing.is_isotropic else None
    try:
        for cid in case_ids:
            pred_mask = _read_mask(pred_cases[cid])
            gt_mask = _read_mask(gt_cases[cid])
            row = metrics.evaluate_pair(pred_mask, gt_mask, spacing)
            if iso is not None:
                pred_conf = _case_conf(pred_cases[cid], cid)
                gt_deg = _gt_angle(gt_cases[cid], gt_mask, _case_conf(gt_cases[cid], cid), iso)
                if pred_conf is not None and gt_deg is not None:
                    try:
                        pred_deg = compute_aop(pred_mask, _read_conf(pred_conf), iso).aop_deg
                        row["aop_abs_err"] = metrics.aop_abs_error(pred_deg, gt_deg)
                    except AopKitError:
                        pass
            rows.append(row)
        report = metrics.aggregate(case_ids, rows)
        text = report.to_csv() if args.format == "csv" else report.to_json()
        _emit(text, args.out)
    except (OSError, FormatError) as err:
        return _fail_io(err)
    return EXIT_OK


def cmd_phantom(args) -> int:
    if args.n < 1:
        print("aopkit phantom: --n must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.corrupt == "logit_noise":
            corruption = phantom.Corruption(kind="logit_noise", sigma=args.sigma)
        elif args.corrupt == "logit_bias":
            corruption = phantom.Corruption(
                kind="logit_bias", class_id=args.class_id, delta=args.delta
            )
        elif args.corrupt == "boundary_erosion":
            corruption = phantom.Corruption(
                kind="boundary_erosion", iterations=args.iterations
            )
        else:
            corruption = phantom.Corruption(kind="none")
    except InvalidInput as err:
        print(f"aopkit phantom: {err}", file=sys.stderr)
        return EXIT_USAGE
    cases = phantom.suite(args.n, args.seed, corruption)
    width = max(4, len(str(args.n - 1)))
    manifest = {
        "format": phantom.META_FORMAT,
        "rng": phantom.RNG_ID,
        "n": args.n,
        "seed": args.seed,
        "corruption": corruption.to_dict(),
        "cases": [],
    }
    try:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        for i, case in enumerate(cases):
            cid = f"case_{i:0{width}d}"
            phantom.save_case(case, args.out_dir / cid)
            manifest["cases"].append({"id": cid, "gt_aop_deg": case.gt_aop_deg})
        (args.out_dir / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        )
    except OSError as err:
        return _fail_io(err)
    return EXIT_OK


def cmd_render(args) -> int:
    try:
        mask = _read_mask(args.mask)
        conf = _read_conf(args.conf)
    except (OSError, FormatError) as err:
        return _fail_io(err)
    svg, result, error = render_svg(mask, conf, PixelSpacing(args.spacing, args.spacing))
    try:
        args.out_svg.write_text(svg)
    except OSError as err:
        return _fail_io(err)
    if error is not None:
        print(
            f"aopkit render: partial render, {type(error).__name__} at stage {error.stage}",
            file=sys.stderr,
        )
        return EXIT_GEOMETRY
    return EXIT_OK


_COMMANDS = {
    "measure": cmd_measure,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "phantom": cmd_phantom,
    "render": cmd_render,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
