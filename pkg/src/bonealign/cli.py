"""Command-line entry point: ``bonealign <command> ...``.

Commands: align, register, evaluate, denoise, sweep-gamma, phantom.

Exit codes: 0 ok, 2 input error (bad arguments or malformed manifest),
3 numerical failure, 4 missing file, 5 dimension mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .align import BLEND_MODES, align, blend_ct_label, blend_ct_slice
from .fileio import (
    ALIGN_SUMMARY_COLUMNS, CORRESPONDENCE_COLUMNS, METRIC_COLUMNS, SWEEP_COLUMNS,
    DimensionError, InputError, load_stack, read_correspondence, read_field, read_image,
    fmt, read_mask, write_csv, write_field, write_image, write_mask, write_stack,
)
from .metrics import evaluate_pair
from .phantom import DegenerateSpecError, PhantomSpec, generate, noisy_corpus
from .pipeline import prepare_pair, register_and_evaluate
from .preprocess import EmptyROIError, PreprocConfig, denoise_pair_scored, roi_mask
from .regengine import Bundle, DisplacementField, NumericalError, RegConfig, warp_array
from .similarity import SimConfig, sim
from .stack import ImageStack, Modality

log = logging.getLogger("bonealign")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3

THREADS_ENV = "BONEALIGN_THREADS"


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    if n < 1:
        raise InputError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def _floats(text: str, n=None):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _lambdas(text):
    return tuple(_floats(text, 4))


def _pair2(text):
    return tuple(_floats(text, 2))


def _canvas(text):
    h, w = _floats(text, 2)
    if h != int(h) or w != int(w) or h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"canvas must be two positive integers, got {text!r}")
    return int(h), int(w)


def _gammas(text):
    # "0..5" (integer range) or a comma list
    if ".." in text:
        lo, hi = text.split("..", 1)
        try:
            return [float(g) for g in range(int(lo), int(hi) + 1)]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad gamma range {text!r}")
    return _floats(text)


# --- align ---------------------------------------------------------------

def cmd_align(args) -> int:
    mr = load_stack(args.mr)
    ct = load_stack(args.ct)
    cfg = SimConfig(gamma=args.gamma)
    cs = align(mr, ct, cfg, orientation=args.orientation, threads=thread_count())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "correspondence.csv", CORRESPONDENCE_COLUMNS, cs.pairs)
    scores = cs.scores
    summary = (
        len(cs), float(np.mean(scores)) if scores else 0.0,
        float(statistics.median(scores)) if scores else 0.0,
        cs.anchor.mr_index, cs.anchor.ct_index, cs.anchor.score,
        args.gamma, args.blend, args.orientation,
    )
    write_csv(out / "summary.csv", ALIGN_SUMMARY_COLUMNS, [summary])
    if args.write_slices:
        for mr_i, frac, _ in cs.pairs:
            write_image(out / f"ct_blend_mr{mr_i:03d}.png", blend_ct_slice(ct, frac, args.blend))
            lab = blend_ct_label(ct, frac, args.blend)
            if lab is not None:
                write_mask(out / f"ct_blend_label_mr{mr_i:03d}.png", lab)
    log.info("aligned %d MR slices; anchor MR %d -> CT %d", len(cs), cs.anchor.mr_index, cs.anchor.ct_index)
    return EXIT_OK


# --- register --------------------------------------------------------------

def _register_jobs(args):
    """List of (mr_index, ct_index_frac, moving_img, moving_lab, fixed_img, fixed_lab)."""
    if args.pair:
        mi, ml, fi, fl = args.pair
        return [(None, None, read_image(mi), read_mask(ml), read_image(fi), read_mask(fl))]
    if not (args.mr and args.ct and args.correspondence):
        raise InputError("register needs --pair or all of --mr, --ct and --correspondence")
    mr = load_stack(args.mr)
    ct = load_stack(args.ct)
    jobs = []
    for mr_i, frac, _ in read_correspondence(args.correspondence):
        if not 0 <= mr_i < len(mr):
            raise InputError(f"correspondence MR index {mr_i} outside the MR stack")
        if not 0.0 <= frac <= len(ct) - 1:
            raise InputError(f"correspondence CT index {frac} outside the CT stack")
        lab_m = mr.labels[mr_i]
        lab_f = blend_ct_label(ct, frac, args.blend)
        if lab_m is None or lab_f is None:
            log.warning("skipping MR %d: missing label", mr_i)
            continue
        jobs.append((mr_i, frac, mr.slices[mr_i], lab_m, blend_ct_slice(ct, frac, args.blend), lab_f))
    if not jobs:
        raise InputError("no labeled pairs to register")
    return jobs


def _check_dims(jobs, canvas):
    for mr_i, _, mi, ml, fi, fl in jobs:
        shapes = {np.shape(mi), np.shape(ml), np.shape(fi), np.shape(fl)}
        if len(shapes) != 1 and canvas is None:
            raise DimensionError(f"pair {mr_i}: image/label dimensions differ ({sorted(shapes)}); pass --canvas")
        if np.shape(mi) != np.shape(ml) or np.shape(fi) != np.shape(fl):
            raise DimensionError(f"pair {mr_i}: label dimensions differ from their images")


def cmd_register(args) -> int:
    jobs = _register_jobs(args)
    _check_dims(jobs, args.canvas)
    if args.no_offset and args.canvas is not None:
        raise InputError("--canvas has no effect with --no-offset")
    reg_cfg = RegConfig(lambdas=args.lambdas, levels=args.levels, iters_per_level=args.iters)
    sim_cfg = SimConfig(gamma=args.gamma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def run(job):
        mr_i, frac, mi, ml, fi, fl = job
        h, w = args.canvas if args.canvas is not None else np.shape(fi)
        pcfg = PreprocConfig(out_h=h, out_w=w, gamma=args.gamma)
        pair = prepare_pair(mi, ml, fi, fl, pcfg, offset=not args.no_offset, denoise=not args.no_denoise)
        result, report = register_and_evaluate(pair, reg_cfg, sim_cfg)
        return pair, result, report

    threads = thread_count()
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    rows = []
    for p, (job, (pair, result, report)) in enumerate(zip(jobs, results)):
        mr_i, frac = job[0], job[1]
        field = result.field
        write_field(out / f"field_{p:03d}.dfld", field)
        write_image(out / f"moving_{p:03d}.png", pair.moving.image)
        write_mask(out / f"moving_label_{p:03d}.png", pair.moving.label >= 0.5)
        write_image(out / f"fixed_{p:03d}.png", pair.fixed.image)
        write_mask(out / f"fixed_label_{p:03d}.png", pair.fixed.label >= 0.5)
        write_image(out / f"warped_{p:03d}.png", np.clip(warp_array(pair.moving.image, field.u), 0, 1))
        write_mask(out / f"warped_label_{p:03d}.png", warp_array(pair.moving.label, field.u) >= 0.5)
        rows.append((p, "" if mr_i is None else mr_i, "" if frac is None else frac, *report.as_tuple(),
                     result.initial_loss, result.final_loss))
        log.info("pair %d: dsc %.4f, loss %.6f -> %.6f", p, report.dsc, result.initial_loss, result.final_loss)
    write_csv(out / "metrics.csv", METRIC_COLUMNS, rows)
    return EXIT_OK


# --- evaluate --------------------------------------------------------------

def cmd_evaluate(args) -> int:
    fixed_img, moving_img = read_image(args.fixed_image), read_image(args.moving_image)
    fixed_lab, moving_lab = read_mask(args.fixed_label), read_mask(args.moving_label)
    shapes = {fixed_img.shape, moving_img.shape, fixed_lab.shape, moving_lab.shape}
    if len(shapes) != 1:
        raise DimensionError(f"image/label dimensions differ: {sorted(shapes)}")
    shape = fixed_img.shape
    field = read_field(args.field) if args.field else DisplacementField.zeros(*shape)
    if field.shape != shape:
        raise DimensionError(f"field dimensions {field.shape} differ from images {shape}")
    fixed = Bundle.of(fixed_img, fixed_lab, roi_mask(fixed_img))
    moving = Bundle.of(moving_img, moving_lab, roi_mask(moving_img))
    report = evaluate_pair(fixed, moving, field, SimConfig(gamma=args.gamma))
    cols = ("dsc", "jaccard", "hd_px", "ssim", "sim_score", "jd_std", "jd_nonpos_frac")
    if args.out:
        write_csv(args.out, cols, [report.as_tuple()])
    else:
        write_csv_stream(cols, [report.as_tuple()])
    return EXIT_OK


def write_csv_stream(columns, rows):
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(v) for v in r])


# --- denoise ---------------------------------------------------------------

def cmd_denoise(args) -> int:
    mr, ct = read_mask(args.mr_label), read_mask(args.ct_label)
    if mr.shape != ct.shape:
        raise DimensionError(f"label dimensions differ: {mr.shape} vs {ct.shape}")
    out_mr, out_ct, res = denoise_pair_scored(mr, ct, args.gamma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_mask(out / "mr_label_denoised.png", out_mr)
    write_mask(out / "ct_label_denoised.png", out_ct)
    write_csv(out / "denoise.csv", ("gamma", "sim", "matched_domains", "mr_pixels_kept", "ct_pixels_kept"),
              [(args.gamma, res.score, res.n_matched, out_mr.count(), out_ct.count())])
    return EXIT_OK


# --- sweep-gamma -----------------------------------------------------------

def sweep_rows(pairs, gammas):
    """Similarity statistics for each gamma over (mr_label, ct_label) pairs.

    Mean SIM is taken over pairs with at least one matched domain (0 when
    there are none); an empty image is a pair whose denoised masks are empty.
    """
    rows = []
    for g in gammas:
        cfg = SimConfig(gamma=g)
        scores, matched, empty = [], 0, 0
        for lab_mr, lab_ct in pairs:
            res = sim(lab_mr, lab_ct, cfg)
            matched += res.n_matched
            if res.n_matched == 0:
                empty += 1
            else:
                scores.append(res.score)
        mean_sim = float(np.mean(scores)) if scores else 0.0
        rows.append((g, mean_sim, matched, matched / len(pairs), empty, len(pairs)))
    return rows


def cmd_sweep_gamma(args) -> int:
    mr = load_stack(args.mr)
    ct = load_stack(args.ct)
    if mr.shape != ct.shape:
        raise DimensionError(f"slice dimensions differ: MR {mr.shape} vs CT {ct.shape}")
    if args.correspondence:
        index_pairs = [(m, int(round(f))) for m, f, _ in read_correspondence(args.correspondence)]
    else:
        if len(mr) != len(ct):
            raise InputError("without --correspondence the stacks must have equal depth (slices pair by index)")
        index_pairs = [(i, i) for i in range(len(mr))]
    pairs = [(mr.labels[m], ct.labels[c]) for m, c in index_pairs
             if 0 <= m < len(mr) and 0 <= c < len(ct) and mr.labels[m] is not None and ct.labels[c] is not None]
    if not pairs:
        raise InputError("no labeled slice pairs to sweep")
    rows = sweep_rows(pairs, args.gammas)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, SWEEP_COLUMNS, rows)
    return EXIT_OK


# --- phantom ---------------------------------------------------------------

def _truth_json(truth, spec: PhantomSpec) -> dict:
    return {
        "spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(spec).items()},
        "mr_to_ct": [float(v) for v in truth.mr_to_ct],
        "mr_z": [float(v) for v in truth.mr_z],
        "ct_z": [float(v) for v in truth.ct_z],
    }


def cmd_phantom(args) -> int:
    out = Path(args.out)
    if args.corpus:
        pairs = noisy_corpus(args.corpus, seed=args.seed, canvas=args.canvas[0], label_noise=args.label_noise)
        mr = ImageStack(Modality.MR, 5.0, tuple(p.mr_image for p in pairs), tuple(p.mr_label for p in pairs))
        ct = ImageStack(Modality.CT, 5.0, tuple(p.ct_image for p in pairs), tuple(p.ct_label for p in pairs))
        write_stack(mr, out / "mr")
        write_stack(ct, out / "ct")
        truth = out / "truth"
        truth.mkdir(parents=True, exist_ok=True)
        for j, p in enumerate(pairs):
            write_mask(truth / f"mr_label_{j:03d}.png", p.mr_truth)
            write_mask(truth / f"ct_label_{j:03d}.png", p.ct_truth)
        return EXIT_OK
    spec = PhantomSpec(
        seed=args.seed, canvas=args.canvas, n_bones=args.bones, depth_mr=args.depth_mr,
        depth_ct=args.depth_ct, gap_mr_mm=args.gap_mr, gap_ct_mm=args.gap_ct,
        contrast_mode=args.contrast, noise_sigma=args.noise, warp_amplitude_px=args.warp,
        translation_px=args.translate, label_noise=args.label_noise,
        opposed_scan=not args.same_order, body_scale=args.body_scale,
    )
    mr, ct, truth = generate(spec)
    write_stack(mr, out / "mr")
    write_stack(ct, out / "ct")
    (out / "truth.json").write_text(json.dumps(_truth_json(truth, spec), indent=2) + "\n")
    write_field(out / "truth_field.dfld", DisplacementField(truth.field))
    return EXIT_OK


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bonealign", description="MR/CT bone slice alignment and registration.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="report progress per pair on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("align", help="find MR -> CT slice correspondences")
    p.add_argument("--mr", required=True, help="MR stack manifest")
    p.add_argument("--ct", required=True, help="CT stack manifest")
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--blend", choices=BLEND_MODES, default="standard",
                   help="interpolation of blended CT slices written with --write-slices")
    p.add_argument("--orientation", type=int, choices=(1, -1), default=1,
                   help="1: CT indices run opposite to MR indices; -1: same direction")
    p.add_argument("--write-slices", action="store_true", help="also write the blended CT slice of every pair")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("register", help="deformable registration of MR (moving) onto CT (fixed)")
    p.add_argument("--pair", nargs=4, metavar=("MR_IMG", "MR_LABEL", "CT_IMG", "CT_LABEL"))
    p.add_argument("--mr", help="MR stack manifest (with --ct and --correspondence)")
    p.add_argument("--ct", help="CT stack manifest")
    p.add_argument("--correspondence", help="correspondence.csv written by align")
    p.add_argument("--lambda", dest="lambdas", type=_lambdas, default=(1.0, 4.0, 3.0, 4.0),
                   help="loss weights l1,l2,l3,l4 (default 1,4,3,4)")
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--iters", type=int, default=150, help="descent attempts per pyramid level")
    p.add_argument("--gamma", type=float, default=2.0, help="aspect gate for denoising and SIM")
    p.add_argument("--blend", choices=BLEND_MODES, default="standard")
    p.add_argument("--canvas", type=_canvas, default=None, help="H,W of the offset-corrected canvas (default: input size)")
    p.add_argument("--no-offset", action="store_true", help="skip offset correction")
    p.add_argument("--no-denoise", action="store_true", help="skip label denoising")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="score a field on an image/label pair")
    p.add_argument("--fixed-image", required=True)
    p.add_argument("--fixed-label", required=True)
    p.add_argument("--moving-image", required=True)
    p.add_argument("--moving-label", required=True)
    p.add_argument("--field", help="field file; identity when omitted")
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--out", help="CSV path (stdout when omitted)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("denoise", help="remove unmatched connected domains from a label pair")
    p.add_argument("--mr-label", required=True)
    p.add_argument("--ct-label", required=True)
    p.add_argument("--gamma", type=float, default=2.0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("sweep-gamma", help="SIM, matched domains and empty images per gamma")
    p.add_argument("--mr", required=True)
    p.add_argument("--ct", required=True)
    p.add_argument("--correspondence", help="pairs to use; default pairs slices by index")
    p.add_argument("--gammas", type=_gammas, default=[0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
                   help="'0..5' or a comma list (default 0..5)")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_sweep_gamma)

    p = sub.add_parser("phantom", help="write a synthetic MR/CT stack pair with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--canvas", type=_canvas, default=(128, 128))
    p.add_argument("--bones", type=int, default=3)
    p.add_argument("--depth-mr", type=int, default=12)
    p.add_argument("--depth-ct", type=int, default=24)
    p.add_argument("--gap-mr", type=float, default=5.0)
    p.add_argument("--gap-ct", type=float, default=2.5)
    p.add_argument("--contrast", choices=("mr_like", "ct_like"), default="mr_like")
    p.add_argument("--noise", type=float, default=0.0, help="intensity noise sigma")
    p.add_argument("--warp", type=float, default=0.0, help="smooth warp amplitude (px)")
    p.add_argument("--translate", type=_pair2, default=(0.0, 0.0), help="MR offset dx,dy (px)")
    p.add_argument("--label-noise", type=int, default=0)
    p.add_argument("--body-scale", type=float, default=1.0)
    p.add_argument("--same-order", action="store_true", help="order CT slices the same way as MR")
    p.add_argument("--corpus", type=int, default=0,
                   help="instead write N independent noisy slice pairs as index-paired stacks")
    p.set_defaults(func=cmd_phantom)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, IndexError, EmptyROIError, DegenerateSpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
