"""Command line entry point: ``aunets <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 missing checkpoint.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import netcore
from .datakit import FRONTAL, VIEWS, DatasetError, SyntheticSpec, generate_synthetic, load_dataset
from .detectors import Detector
from .evalkit import occlusion_saliency, read_predictions, report, write_predictions
from .multiview import MissingModelError
from .netcore import Arch, FusionMode, get_profile
from .workflow import Experiment, RunConfig, VideoStore, checkpoint_path, label_map, record_bundle

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MISSING = 0, 1, 2, 3

log = logging.getLogger("aunets")

ARCH_LABELS = {
    Arch.HYDRANET: "HydraNet",
    Arch.AUNETS: "AUNets",
    Arch.CHANNELS: "Channels",
    Arch.HORIZONTAL: "Horizontal",
    Arch.PI_CONV: "pi/conv",
    Arch.PI_FC6: "pi/fc6",
    Arch.PI_FC7: "pi/fc7",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, data=True):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--profile", choices=["tiny", "vgg16"])
    p.add_argument("--fusion", help="rgb_only, of_only, channels, horizontal, pi_conv, pi_fc6, pi_fc7")
    p.add_argument("--median-window", type=int, dest="median_window")
    p.add_argument("--fold", type=int, choices=[0, 1, 2])
    p.add_argument("--out", default="runs", help="output directory (models, predictions, reports)")
    if data:
        p.add_argument("--data", required=True, help="dataset root")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="aunets", description="Multi-view facial action unit detection.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render the synthetic multi-view corpus")
    p.add_argument("--out", required=True, help="dataset root to create")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subjects", type=int, default=6)
    p.add_argument("--views", type=int, default=9)
    p.add_argument("--frames", type=int, default=48)
    p.add_argument("--side", type=int, default=96)
    p.add_argument("--texture", type=float, default=0.0)

    _common(sub.add_parser("pretrain", help="train the expression encoder all detectors start from"))
    _common(sub.add_parser("train-view", help="train the view classifier"))

    p = sub.add_parser("train-au", help="train one (view, AU, fusion) detector")
    _common(p)
    p.add_argument("--au", type=int, required=True)
    p.add_argument("--view", required=True, help="V1..V9 or 'frontal'")

    p = sub.add_parser("predict", help="run the view cascade over the test fold")
    _common(p)
    p.add_argument("--subjects", nargs="*", help="subjects to predict (default: the fold's test subjects)")

    p = sub.add_parser("evaluate", help="per-AU F1 / accuracy report for a prediction file")
    _common(p)
    p.add_argument("--predictions", help="prediction CSV (default: the one predict wrote)")
    p.add_argument("--decisions", choices=["smoothed", "raw"], default="smoothed")
    p.add_argument("--by-view", action="store_true", help="one report per predicted view")

    p = sub.add_parser("params", help="parameter counts of the seven architectures")
    p.add_argument("--profile", choices=["tiny", "vgg16"], default="vgg16")
    p.add_argument("--config", help=argparse.SUPPRESS)

    p = sub.add_parser("saliency", help="occlusion saliency map for one frame")
    _common(p)
    p.add_argument("--au", type=int, required=True)
    p.add_argument("--view", default=FRONTAL)
    p.add_argument("--video", help="video id (default: first video of the view)")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--stride", type=int)
    p.add_argument("--occlude-flow", action="store_true")
    return ap


def _view(name: str) -> str:
    v = FRONTAL if name.lower() == "frontal" else name.upper()
    if v not in VIEWS:
        raise UsageError(f"unknown view {name!r}; use V1..V9 or 'frontal'")
    return v


def run_config(args) -> RunConfig:
    flags = {k: getattr(args, k, None) for k in ("seed", "profile", "fusion", "median_window", "fold")}
    rc = RunConfig.from_file(args.config, **flags) if args.config else RunConfig().override(**flags)
    try:
        FusionMode.parse(rc.fusion)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if rc.median_window < 1 or rc.median_window % 2 == 0:
        raise UsageError("--median-window must be a positive odd integer")
    return rc


def _experiment(args) -> Experiment:
    if not Path(args.data).is_dir():
        raise DatasetError(f"dataset root {args.data} does not exist")
    return Experiment.open(args.data, args.out, run_config(args))


def _predictions_path(ex: Experiment) -> Path:
    return ex.out / "predictions" / f"{ex.dataset}_fold{ex.rc.fold}_{FusionMode.parse(ex.rc.fusion).value}.csv"


# -- subcommands ---------------------------------------------------------------

def cmd_gen_data(args):
    spec = SyntheticSpec(n_subjects=args.subjects, n_views=args.views, frames_per_video=args.frames,
                         seed=args.seed, image_side=args.side, texture=args.texture)
    if spec.n_subjects < 3 or not 1 <= spec.n_views <= len(VIEWS) or spec.frames_per_video < 1:
        raise UsageError("need >= 3 subjects, 1..9 views and >= 1 frame per video")
    root = generate_synthetic(spec, args.out)
    print(f"wrote {spec.n_subjects * spec.n_views * spec.frames_per_video} frames to {root}")


def cmd_pretrain(args):
    ex = _experiment(args)
    net, logrows = ex.run_pretrain()
    print(f"pretrained encoder -> {ex.pretrained_path()} (val accuracy {max(r['f1_val'] for r in logrows):.3f})")


def cmd_train_view(args):
    ex = _experiment(args)
    net, logrows = ex.run_view_classifier()
    print(f"view classifier -> {ex.view_classifier_path()} (val accuracy {max(r['f1_val'] for r in logrows):.3f})")


def cmd_train_au(args):
    ex = _experiment(args)
    view = _view(args.view)
    if args.au not in ex.aus:
        raise UsageError(f"AU{args.au} is not labelled in {args.data} (have {list(ex.aus)})")
    if view not in ex.views:
        raise UsageError(f"view {view} is not present in {args.data}")
    try:
        det, logrows, path, digest = ex.train_au(view, args.au)
    except MissingModelError:
        raise
    except Exception as exc:
        raise RuntimeError(f"training {view} / AU{args.au} failed: {exc}") from exc
    print(f"{view} AU{args.au} -> {path} (best val F1 {max(r['f1_val'] for r in logrows):.3f}, sha256 {digest[:12]})")


def cmd_predict(args):
    ex = _experiment(args)
    rows, views = ex.predict(args.subjects or None)
    out = _predictions_path(ex)
    write_predictions(out, rows)
    vpath = out.with_name(out.stem + "_views.csv")
    with open(vpath, "w") as fh:
        fh.write("video_id,true_view,predicted_view\n")
        for vid, (true, pred) in sorted(views.items()):
            fh.write(f"{vid},{true},{pred}\n")
    acc = np.mean([t == p for t, p in views.values()])
    print(f"predictions -> {out}\nview accuracy {acc:.3f} over {len(views)} videos")


def cmd_evaluate(args):
    ex = _experiment(args)
    path = Path(args.predictions) if args.predictions else _predictions_path(ex)
    if not path.exists():
        raise DatasetError(f"prediction file {path} not found; run predict first")
    rows = read_predictions(path)
    labels = label_map(ex.records)
    missing = {(r["video_id"], int(r["frame"])) for r in rows} - set(labels)
    if missing:
        raise DatasetError(f"{len(missing)} predicted frames have no labels in {args.data}, e.g. {sorted(missing)[0]}")
    col = f"decision_{args.decisions}"
    reports = report(rows, labels, ("predicted_view",) if args.by_view else (), col)
    rdir = ex.out / "reports"
    rdir.mkdir(parents=True, exist_ok=True)
    text = "".join(r.render_text() + "\n" for r in reports)
    csv_text = "".join(r.render_csv() for r in reports)
    stem = path.stem + ("_by_view" if args.by_view else "") + f"_{args.decisions}"
    (rdir / f"{stem}.txt").write_text(text)
    (rdir / f"{stem}.csv").write_text(csv_text)
    print(text, end="")


def params_table(profile_name: str) -> str:
    profile = get_profile(profile_name)
    lines = [f"{'architecture':<12} {'total':>13} {'learnable':>13} {'total(M)':>9} {'learn(M)':>9}"]
    for arch, (total, learn) in netcore.param_table(profile).items():
        lines.append(f"{ARCH_LABELS[arch]:<12} {total:>13,} {learn:>13,} {total // 10**6:>8}m {learn // 10**6:>8}m")
    return "\n".join(lines) + "\n"


def cmd_params(args):
    print(params_table(args.profile), end="")


def cmd_saliency(args):
    ex = _experiment(args)
    view = _view(args.view)
    mode = FusionMode.parse(ex.rc.fusion)
    path = checkpoint_path(ex.models_dir, ex.dataset, view, args.au, mode)
    if not path.exists():
        from .multiview import MissingCheckpointError
        raise MissingCheckpointError(view, args.au, f"{path} not found")
    det = Detector.load(path)
    recs = [r for r in ex.records if r.view == view and (args.video is None or r.video_id == args.video)]
    if not recs:
        raise DatasetError(f"no frames for view {view}" + (f" / video {args.video}" if args.video else ""))
    vid = recs[0].video_id
    rec = next((r for r in recs if r.video_id == vid and r.frame_index == args.frame), None)
    if rec is None:
        raise DatasetError(f"frame {args.frame} not in video {vid}")
    store = VideoStore([r for r in recs if r.video_id == vid])
    bundle = record_bundle(store, rec, mode, ex.side)
    if isinstance(bundle, tuple):
        bundle = tuple(b.astype(np.float32) for b in bundle)
    sal = occlusion_saliency(det.predict, bundle, args.patch, args.stride, occlude_flow=args.occlude_flow)
    out = ex.out / "saliency" / f"{vid}_f{args.frame:06d}_AU{args.au}_{mode.value}.npy"
    out.parent.mkdir(parents=True, exist_ok=True)
    np.save(out, sal)
    print(f"saliency {sal.shape} -> {out}; max drop {sal.max():.4f}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-view": cmd_train_view,
    "train-au": cmd_train_au,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "params": cmd_params,
    "saliency": cmd_saliency,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"aunets {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingModelError as exc:
        print(f"aunets {args.command}: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DatasetError, FileNotFoundError, OSError) as exc:
        print(f"aunets {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # malformed config files and dataset contents surface as ValueError
        print(f"aunets {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
