"""Command-line entry point: ``msbdn <subcommand> [options]``.

Every subcommand accepts ``--config PATH``, repeatable ``--set key=value``,
``--seed N`` and ``--out DIR``.  Config keys are the field names of
NetworkConfig, TrainConfig and SceneConfig.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from msbdn import config as cfgmod
from msbdn.haze import (
    IdealDehazer,
    SceneParams,
    _smooth_field,
    identity_dehazer,
    poh_sequence,
    random_scene,
    sos_boost_images,
    strictly_decreasing,
    synthesize_hazy,
)
from msbdn.imageio import ImageFormatError, load_depth, load_rgb, save_gray, save_rgb, write_pgm
from msbdn.metrics import MetricReport, NumericError, primitive_grad_checks, psnr, ssim
from msbdn.network import VARIANTS, NetworkConfig, count_parameters, model_forward
from msbdn.params import make_rng
from msbdn.tensor import Tensor, no_grad
from msbdn.training import (
    DataError,
    DatasetManifest,
    ManifestEntry,
    TrainConfig,
    evaluate,
    load_checkpoint,
    load_dataset,
    model_grad_check,
    train,
)

log = logging.getLogger("msbdn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SYNTH_STREAM = 2
PRIMITIVE_TOL = 1e-3
MODEL_TOL = 1e-2


@dataclass
class SceneConfig:
    """Ranges used when synthesizing haze."""

    beta_range: tuple[float, float] = (0.4, 1.6)
    airlight_range: tuple[float, float] = (0.7, 1.0)
    depth_range: tuple[float, float] = (0.5, 2.0)


CONFIG_CLASSES = (NetworkConfig, TrainConfig, SceneConfig)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

@dataclass
class Settings:
    ncfg: NetworkConfig
    tcfg: TrainConfig
    scene: SceneConfig
    seed: int


def load_settings(args):
    values = cfgmod.read_config(args.config) if args.config else {}
    values.update(cfgmod.parse_overrides(args.set))
    if args.seed is not None:
        values["seed"] = str(args.seed)
    try:
        cfgmod.check_keys(values, *CONFIG_CLASSES)
        ncfg = cfgmod.build(NetworkConfig, values)
        tcfg = cfgmod.build(TrainConfig, values)
        scene = cfgmod.build(SceneConfig, values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return Settings(ncfg, tcfg, scene, tcfg.seed)


def _out_dir(args, required=True):
    if args.out is None:
        if required:
            raise UsageError(f"{args.command} needs --out DIR")
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# ---------------------------------------------------------------------------
# synthesize
# ---------------------------------------------------------------------------

def _scene_values(rng, scene):
    airlight = float(rng.uniform(*scene.airlight_range))
    beta = float(rng.uniform(*scene.beta_range))
    return airlight, beta


def synthesize_dir(clean_dir, depth_dir, out, scene, seed):
    """Haze every PPM in ``clean_dir``; returns (manifest, failures)."""
    clean_dir = Path(clean_dir)
    files = sorted(clean_dir.glob("*.ppm"))
    if not files:
        raise DataError(f"no .ppm images in {clean_dir}")
    for sub in ("hazy", "transmission"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries, failures = [], []
    for index, path in enumerate(files):
        rng = make_rng(seed, SYNTH_STREAM, index)
        try:
            clean = load_rgb(path)
            if depth_dir is not None:
                depth = load_depth(Path(depth_dir) / (path.stem + ".pgm"), scene.depth_range)
                if depth.shape[1:] != clean.shape[1:]:
                    raise ImageFormatError(f"depth map size {depth.shape[1:]} differs from image size {clean.shape[1:]}")
            else:
                # no depth supplied: a smooth random field stands in for scene depth
                d0, d1 = scene.depth_range
                depth = (d0 + (d1 - d0) * _smooth_field(rng, clean.shape[1:]))[None]
            airlight, beta = _scene_values(rng, scene)
            pair = synthesize_hazy(clean, SceneParams(airlight, beta=beta), depth)
        except (OSError, ValueError) as exc:
            failures.append((path.name, str(exc)))
            log.error("skipping %s: %s", path.name, exc)
            continue
        save_rgb(out / "hazy" / f"{path.stem}.ppm", pair.hazy)
        save_gray(out / "transmission" / f"{path.stem}.pgm", pair.transmission)
        entries.append(
            ManifestEntry(
                clean=_relpath(path, out),
                hazy=f"hazy/{path.stem}.ppm",
                transmission=f"transmission/{path.stem}.pgm",
                airlight=airlight,
                beta=beta,
            )
        )
    return DatasetManifest(entries, out), failures


def _relpath(path, start):
    return Path(os.path.relpath(Path(path).resolve(), Path(start).resolve())).as_posix()


def synthesize_random(count, size, out, scene, seed):
    """Write ``count`` fully synthetic scenes (clean, depth, hazy, transmission)."""
    for sub in ("clean", "depth", "hazy", "transmission"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    d0, d1 = scene.depth_range
    for index in range(count):
        rng = make_rng(seed, SYNTH_STREAM, index)
        sc = random_scene(rng, size, scene.beta_range, scene.airlight_range, scene.depth_range)
        name = f"scene{index:04d}"
        save_rgb(out / "clean" / f"{name}.ppm", sc.clean)
        # store depth quantized, then haze from the decoded depth so files stay consistent
        write_pgm(out / "depth" / f"{name}.pgm", np.floor((sc.depth[0] - d0) / (d1 - d0) * 255.0 + 0.5).astype(np.uint8))
        clean = load_rgb(out / "clean" / f"{name}.ppm")
        depth = load_depth(out / "depth" / f"{name}.pgm", scene.depth_range)
        pair = synthesize_hazy(clean, SceneParams(sc.airlight, beta=sc.beta), depth)
        save_rgb(out / "hazy" / f"{name}.ppm", pair.hazy)
        save_gray(out / "transmission" / f"{name}.pgm", pair.transmission)
        entries.append(
            ManifestEntry(
                clean=f"clean/{name}.ppm",
                hazy=f"hazy/{name}.ppm",
                depth=f"depth/{name}.pgm",
                transmission=f"transmission/{name}.pgm",
                airlight=sc.airlight,
                beta=sc.beta,
            )
        )
    return DatasetManifest(entries, out)


def cmd_synthesize(args, st):
    out = _out_dir(args)
    if (args.clean_dir is None) == (args.random is None):
        raise UsageError("synthesize needs exactly one of --clean-dir or --random N")
    if args.random is not None:
        manifest = synthesize_random(args.random, (args.size, args.size), out, st.scene, st.seed)
        failures = []
    else:
        manifest, failures = synthesize_dir(args.clean_dir, args.depth_dir, out, st.scene, st.seed)
    manifest.save(out / "manifest.csv")
    print(f"wrote {len(manifest.entries)} hazy images to {out}; {len(failures)} failed")
    for name, why in failures:
        print(f"  failed: {name}: {why}")
    return EXIT_DATA if failures else EXIT_OK


# ---------------------------------------------------------------------------
# train / dehaze / eval
# ---------------------------------------------------------------------------

def _dataset(path, scene):
    if path is None:
        return None
    ds = load_dataset(DatasetManifest.load(path), scene.depth_range)
    ds.airlight_range, ds.beta_range = scene.airlight_range, scene.beta_range
    return ds


def cmd_train(args, st):
    out = _out_dir(args)
    if args.manifest is None:
        raise UsageError("train needs --manifest")
    ds = _dataset(args.manifest, st.scene)
    val = _dataset(args.val, st.scene)
    res = train(ds, st.ncfg, st.tcfg, out_dir=out, val=val, resume=args.resume)
    last = res.step_log[-1][3] if res.step_log else float("nan")
    print(f"trained {len(res.step_log)} steps; final loss {last:.6g}; checkpoint {res.checkpoint}")
    return EXIT_OK


def _pad_to_multiple(x, m):
    h, w = x.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    return np.pad(x, [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)], mode="edge"), (h, w)


def dehaze_image(hazy, ncfg, store):
    """Dehaze one (3, H, W) image of any size; output clamped to [0, 1]."""
    x, (h, w) = _pad_to_multiple(np.asarray(hazy)[None], ncfg.size_multiple)
    with no_grad():
        y = model_forward(Tensor(x.astype(store.dtype)), ncfg, store).data
    return np.clip(y[0, :, :h, :w].astype(np.float64), 0.0, 1.0)


def _input_images(paths):
    files = []
    for p in paths:
        p = Path(p)
        files.extend(sorted(p.glob("*.ppm")) if p.is_dir() else [p])
    return files


def cmd_dehaze(args, st):
    out = _out_dir(args)
    ck = load_checkpoint(args.checkpoint)
    files = _input_images(args.inputs)
    if not files:
        raise DataError("no input images")
    for path in files:
        save_rgb(out / path.name, dehaze_image(load_rgb(path), ck.ncfg, ck.store))
    print(f"dehazed {len(files)} images into {out}")
    return EXIT_OK


def eval_rows(dataset, ncfg, store):
    """Per-image (name, psnr, ssim) on 8-bit quantized outputs, as saved images would score."""
    rows = []
    for s in dataset.samples:
        if s.hazy is None:
            continue
        pred = dehaze_image(s.hazy, ncfg, store)
        rows.append((s.name, psnr(pred, s.clean, quantized=True), ssim(pred, s.clean, quantized=True)))
    return rows


def metrics_csv(rows):
    report = MetricReport.from_rows(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image", "psnr", "ssim"])
    for name, p, s in rows:
        w.writerow([name, f"{p:.4f}", f"{s:.6f}"])
    w.writerow(["mean", f"{report.psnr_db:.4f}", f"{report.ssim:.6f}"])
    return buf.getvalue()


def cmd_eval(args, st):
    if args.manifest is None:
        raise UsageError("eval needs --manifest")
    ck = load_checkpoint(args.checkpoint)
    ds = _dataset(args.manifest, st.scene)
    text = metrics_csv(eval_rows(ds, ck.ncfg, ck.store))
    out = _out_dir(args, required=False)
    if out is not None:
        (out / "eval.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

ABLATION_FIELDS = ("variant", "dff", "params", "val_psnr", "val_ssim")


def ablation_rows(train_ds, val_ds, ncfg, tcfg, variants, dff_modes):
    """Train every (variant, dff) combination with the same seed; failures give NaN rows."""
    rows, failed = [], 0
    for variant in variants:
        for dff in dff_modes:
            cfg = replace(ncfg, decoder_variant=variant, dff_enabled=dff)
            try:
                res = train(train_ds, cfg, tcfg)
                vp, vs = evaluate(val_ds, cfg, res.store, tcfg.patch)
            except (NumericError, DataError, ValueError) as exc:
                log.error("variant %s (dff=%s) failed: %s", variant, dff, exc)
                vp = vs = float("nan")
                failed += 1
            rows.append((variant, dff, count_parameters(cfg), vp, vs))
    return rows, failed


def ablation_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_FIELDS)
    for variant, dff, params, vp, vs in rows:
        w.writerow([variant, "on" if dff else "off", params, f"{vp:.4f}", f"{vs:.6f}"])
    return buf.getvalue()


def cmd_ablate(args, st):
    out = _out_dir(args)
    if args.manifest is None or args.val is None:
        raise UsageError("ablate needs --manifest and --val")
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variant(s) {bad}; choose from {list(VARIANTS)}")
    dff_modes = {"on": [True], "off": [False], "both": [True, False]}[args.dff]
    rows, failed = ablation_rows(_dataset(args.manifest, st.scene), _dataset(args.val, st.scene), st.ncfg, st.tcfg, variants, dff_modes)
    text = ablation_csv(rows)
    (out / "ablation.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------------------
# verification harnesses
# ---------------------------------------------------------------------------

def cmd_gradcheck(args, st):
    ok = True
    for name, r in primitive_grad_checks(st.seed).items():
        passed = r.max_rel_err < PRIMITIVE_TOL
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: {r}")
    variants = args.variants.split(",") if args.variants else [st.ncfg.decoder_variant]
    for variant in variants:
        if variant not in VARIANTS:
            raise UsageError(f"unknown variant {variant!r}; choose from {list(VARIANTS)}")
        cfg = replace(st.ncfg, decoder_variant=variant)
        r = model_grad_check(cfg, st.seed, args.size)
        passed = r.max_rel_err < MODEL_TOL
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} model[{variant}, dff={'on' if cfg.dff_enabled else 'off'}]: {r}")
    return EXIT_OK if ok else EXIT_NUMERIC


def boost_table(gammas, iterations, scenes, size, scene_cfg, seed):
    """Mean PoH per iteration for each gamma, plus per-gamma violation counts.

    Returns ``[(label, [poh_0..poh_N], violations)]``; the identity dehazer
    is appended last as a reference row.
    """
    rows = []
    generated = [
        random_scene(make_rng(seed, SYNTH_STREAM, k), (size, size), scene_cfg.beta_range, scene_cfg.airlight_range, scene_cfg.depth_range)
        for k in range(scenes)
    ]
    for gamma in gammas:
        seqs, violations = [], 0
        for sc in generated:
            g = IdealDehazer(sc.transmission, sc.airlight, gamma)
            seq = poh_sequence(sos_boost_images(sc.hazy(), g, iterations), g.residual_transmission, sc.airlight)
            violations += not strictly_decreasing(seq)
            seqs.append(seq)
        rows.append((f"gamma={gamma:g}", list(np.mean(seqs, axis=0)), violations))
    seqs = [poh_sequence(sos_boost_images(sc.hazy(), identity_dehazer, iterations), sc.transmission, sc.airlight) for sc in generated]
    rows.append(("identity", list(np.mean(seqs, axis=0)), sum(not strictly_decreasing(s) for s in seqs)))
    return rows


def cmd_boostcheck(args, st):
    gammas = args.gammas
    if any(not 0.0 < g < 1.0 for g in gammas):
        raise UsageError(f"every gamma must lie in (0, 1), got {gammas}")
    rows = boost_table(gammas, args.iterations, args.scenes, args.size, st.scene, st.seed)
    header = ["dehazer"] + [f"n={n}" for n in range(args.iterations + 1)] + ["violations"]
    print(",".join(header))
    for label, seq, violations in rows:
        print(",".join([label] + [f"{v:.6f}" for v in seq] + [str(violations)]))
    print(
        "note: the identity dehazer does not lower the portion of haze, so it fails the "
        "precondition of the boosting argument; its row is for reference and not checked."
    )
    bad = sum(v for label, _, v in rows if label != "identity")
    print(f"{'PASS' if bad == 0 else 'FAIL'}: {bad} non-decreasing sequence(s) over {len(gammas) * args.scenes}")
    return EXIT_OK if bad == 0 else EXIT_NUMERIC


def cmd_params(args, st):
    print(count_parameters(st.ncfg))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value config file")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], help="override a config key (repeatable)")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="msbdn", description="Boosted multi-scale dehazing laboratory.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synthesize", parents=[common], help="haze clean images")
    s.add_argument("--clean-dir")
    s.add_argument("--depth-dir")
    s.add_argument("--random", type=int, metavar="N", help="generate N synthetic scenes instead")
    s.add_argument("--size", type=int, default=64)
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--manifest")
    s.add_argument("--val")
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("dehaze", parents=[common], help="dehaze PPM images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("inputs", nargs="+")
    s.set_defaults(func=cmd_dehaze)

    s = sub.add_parser("eval", parents=[common], help="PSNR / SSIM of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="train and compare decoder variants")
    s.add_argument("--manifest")
    s.add_argument("--val")
    s.add_argument("--variants", help=f"comma-separated subset of {','.join(VARIANTS)}")
    s.add_argument("--dff", choices=("on", "off", "both"), default="both")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--variants", help="variants for the end-to-end check (default: configured one)")
    s.add_argument("--size", type=int, default=8)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("boostcheck", parents=[common], help="portion-of-haze under boosting")
    s.add_argument("--gammas", type=_floats, default=[0.25, 0.5, 0.75])
    s.add_argument("--iterations", type=int, default=5)
    s.add_argument("--scenes", type=int, default=10)
    s.add_argument("--size", type=int, default=32)
    s.set_defaults(func=cmd_boostcheck)

    s = sub.add_parser("params", parents=[common], help="learnable parameter count")
    s.set_defaults(func=cmd_params)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        st = load_settings(args)
        return args.func(args, st)
    except UsageError as exc:
        print(f"msbdn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"msbdn {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ImageFormatError, OSError) as exc:
        print(f"msbdn {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # config/shape problems discovered after parsing
        print(f"msbdn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
