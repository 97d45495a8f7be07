"""Command-line surface: dataset synthesis, training, prediction,
evaluation, and cost profiling.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
failure (non-finite loss during training).
"""

import argparse
import os
import sys

import numpy as np

from . import costmodel, data, metrics
from .model import FULL_DECODER, ModelConfig, CpdModel, cpd_forward
from .tensor import Tensor
from .training import (NumericalError, CheckpointError, TrainConfig, fit,
                       load_checkpoint, log_to_tsv, model_from_checkpoint,
                       save_checkpoint)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_objects(spec: str) -> tuple[int, int]:
    try:
        lo, hi = spec.split("..")
        lo, hi = int(lo), int(hi)
    except ValueError:
        raise UsageError(f"--objects must look like MIN..MAX, got {spec!r}") from None
    if lo < 1 or hi < lo:
        raise UsageError(f"--objects range {spec!r} is invalid (need 1 <= MIN <= MAX)")
    return lo, hi


def _parse_opt_level(value: str):
    if value == "full":
        return FULL_DECODER
    if value in ("2", "3", "4"):
        return int(value)
    raise UsageError(f"--opt-level must be 2, 3, 4 or full, got {value!r}")


def build_parser() -> _Parser:
    p = _Parser(prog="cpdnet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--side", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--objects", default="1..3", metavar="MIN..MAX")

    tp = sub.add_parser("train", help="train on a dataset directory")
    tp.add_argument("--data", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--epochs", type=int, default=20)
    tp.add_argument("--lr", type=float, default=1e-4)
    tp.add_argument("--batch", type=int, default=4)
    tp.add_argument("--opt-level", default="3", choices=["2", "3", "4", "full"])
    tp.add_argument("--side", type=int, default=None,
                    help="input side; defaults to the dataset's native side")
    tp.add_argument("--seed", type=int, default=0)

    pp = sub.add_parser("predict", help="run one image through a checkpoint")
    pp.add_argument("--ckpt", required=True)
    pp.add_argument("--image", required=True)
    pp.add_argument("--out", required=True)
    pp.add_argument("--branch", choices=["attention", "detection"], default="detection")
    pp.add_argument("--emit-attention", default=None, metavar="F")

    ep = sub.add_parser("eval", help="evaluate a checkpoint over a dataset")
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--report", required=True)
    ep.add_argument("--metric-set", choices=["saliency", "shadow"], default="saliency")

    fp = sub.add_parser("profile", help="analytical cost comparison")
    fp.add_argument("--side", type=int, default=352)
    fp.add_argument("--channels", default="64,128,256,512,512")
    fp.add_argument("--modes", default="full,partial_l3,cpd")
    fp.add_argument("--out", required=True)
    return p


# ---------------------------------------------------------------------------
# commands


def _cmd_synth(args) -> int:
    lo, hi = _parse_objects(args.objects)
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    cfg = data.SceneConfig(side=args.side, min_objects=lo, max_objects=hi, seed=args.seed)
    manifest = data.write_dataset(args.out, cfg, args.count)
    if args.count == 0:
        print(f"warning: wrote an empty manifest to {manifest}", file=sys.stderr)
    else:
        print(f"wrote {args.count} sample pairs and {manifest}")
    return 0


def _native_side(loaders) -> int:
    sample = loaders[0].load()
    return sample.image.shape[2]


def _load_samples(data_dir, side=None):
    manifest = os.path.join(data_dir, "manifest.tsv")
    if not os.path.isfile(manifest):
        raise data.ManifestError(f"no manifest.tsv in {data_dir}")
    loaders = data.load_manifest(manifest)
    samples = [ld.load() for ld in loaders]
    if side is not None and samples and samples[0].image.shape[2] != side:
        resized = []
        for s in samples:
            img = data.resize_bilinear(s.image.data[0], side)
            msk = (data.resize_bilinear(s.mask.data[0, 0], side) >= 0.5).astype(np.float32)
            resized.append(data.Sample(image=Tensor(img[None]),
                                       mask=Tensor(msk[None, None]), id=s.id))
        samples = resized
    return samples


def _cmd_train(args) -> int:
    samples = _load_samples(args.data)
    if not samples:
        raise data.ManifestError(f"dataset in {args.data} is empty")
    native = samples[0].image.shape[2]
    side = args.side if args.side is not None else native
    if side != native:
        samples = _load_samples(args.data, side=side)
    config = ModelConfig.toy(opt_level=_parse_opt_level(args.opt_level), input_side=side)
    model = CpdModel(config, seed=args.seed)
    tcfg = TrainConfig(batch_size=args.batch, lr=args.lr, epochs=args.epochs, seed=args.seed)
    log, _ = fit(model, samples, tcfg)
    save_checkpoint(args.out, model)
    log_path = f"{args.out}.log.tsv"
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(log_to_tsv(log))
    print(f"final epoch loss {log[-1].loss:.6f}; checkpoint at {args.out}, log at {log_path}")
    return 0


def _predict_maps(model: CpdModel, image: np.ndarray):
    """Forward one (3,h,w) image; returns full-resolution maps for predict
    (detection, attention-or-None, holistic-or-None) by bilinearly upsampling
    the decoder-grid probability maps, so the holistic map dominates the
    attention map pointwise even after upsampling."""
    from .tensor import upsample_bilinear
    out = cpd_forward(model, Tensor(image[None]))
    cfg = model.config
    factor = 1 if cfg.full_decoder else 2 ** (cfg.opt_level - 1)
    det = upsample_bilinear(out.s_d, factor).data[0, 0]
    attn = hol = None
    if out.s_i is not None:
        attn = upsample_bilinear(out.s_i, factor).data[0, 0]
        hol = upsample_bilinear(out.s_h, factor).data[0, 0]
    return det, attn, hol


def _eval_maps(model: CpdModel, image: np.ndarray):
    """Full-resolution probability maps for metric evaluation: the sigmoid
    of the upsampled logits, i.e. the quantity the training loss optimizes."""
    from .tensor import sigmoid
    out = cpd_forward(model, Tensor(image[None]))
    det = sigmoid(out.logits_d).data[0, 0]
    attn = sigmoid(out.logits_i).data[0, 0] if out.logits_i is not None else None
    return det, attn


def _cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    image = data.read_ppm(args.image)
    side = model.config.input_side
    if image.shape[1] != side or image.shape[2] != side:
        raise data.CodecError(
            f"image is {image.shape[1]}x{image.shape[2]} but the checkpoint expects "
            f"{side}x{side}; resize the input (e.g. regenerate with --side {side})")
    det, attn, hol = _predict_maps(model, image)
    if args.branch == "attention":
        if attn is None:
            raise CheckpointError("this checkpoint is a full-decoder model; "
                                  "it has no attention branch")
        data.write_pgm(args.out, attn)
    else:
        data.write_pgm(args.out, det)
    if args.emit_attention:
        if hol is None:
            raise CheckpointError("full-decoder checkpoints have no attention map to emit")
        data.write_pgm(args.emit_attention, hol)
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = model_from_checkpoint(ckpt)
    samples = _load_samples(args.data, side=model.config.input_side)
    if not samples:
        raise data.ManifestError(f"dataset in {args.data} is empty")
    preds_i, preds_d, gts, ids = [], [], [], []
    for s in samples:
        det, attn = _eval_maps(model, s.image.data[0])
        preds_d.append(det)
        if attn is not None:
            preds_i.append(attn)
        gts.append(s.mask.data[0, 0])
        ids.append(s.id)
    include_ber = args.metric_set == "shadow"
    reports = {}
    if preds_i:
        reports["attention"] = metrics.evaluate_dataset(preds_i, gts, ids)
    reports["detection"] = metrics.evaluate_dataset(preds_d, gts, ids)
    with open(args.report, "w", encoding="utf-8") as fh:
        fh.write(metrics.report_to_tsv(reports, include_ber=include_ber))
    print(metrics.report_summary(reports, include_ber=include_ber))
    return 0


_MODE_ALIASES = {"full": "full_decoder", "cpd": "cpd_two_branch"}


def _cmd_profile(args) -> int:
    try:
        channels = tuple(int(c) for c in args.channels.split(","))
    except ValueError:
        raise UsageError(f"--channels must be comma-separated ints, got {args.channels!r}") from None
    if len(channels) != 5:
        raise UsageError("--channels needs exactly 5 values")
    modes = []
    for m in args.modes.split(","):
        m = m.strip()
        m = _MODE_ALIASES.get(m, m)
        if m not in costmodel.MODES:
            raise UsageError(f"unknown mode {m!r}; choose from {costmodel.MODES} "
                             "(aliases: full, cpd)")
        modes.append(m)
    if not modes:
        raise UsageError("--modes is empty")
    cfg = ModelConfig(block_channels=channels, input_side=args.side)
    models = [costmodel.model_cost(cfg, m) for m in modes]
    rows = costmodel.compare(models)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(costmodel.comparison_to_tsv(rows))
    print(costmodel.comparison_to_text(rows))
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "eval": _cmd_eval,
    "profile": _cmd_profile,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (data.CodecError, data.ManifestError, data.GenerationError,
            CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
