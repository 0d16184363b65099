"""Command line entry point: ``dcnse <subcommand> ...``.

Exit status is 0 on success, 1 for usage errors and 2 when the command
itself fails (bad input file, diverged training, ...).
"""
import argparse
import logging
import sys

import numpy as np

from . import data as dm
from . import signal as sig
from . import train as tr
from .checkpoint import CheckpointError, load_model
from .model import attention_maps, enhance_utterance

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; route it to our usage code instead
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _cmd_train(args):
    cfg = tr.read_config(args.config)
    if args.checkpoint_dir:
        cfg.checkpoint_dir = args.checkpoint_dir
    res = tr.train(cfg, resume=args.resume)
    last = res.epochs[-1] if res.epochs else {}
    print(f"trained {last.get('step', 0)} steps; checkpoint {res.checkpoint}")


def _cmd_enhance(args):
    model, _, _ = load_model(args.ckpt)
    audio = dm.wav_read(args.inp)
    if audio.sample_rate != dm.SAMPLE_RATE:
        logging.warning("input rate %d Hz differs from the %d Hz training rate",
                        audio.sample_rate, dm.SAMPLE_RATE)
    est = enhance_utterance(model, audio.samples)
    dm.wav_write(args.out, dm.AudioBuffer(est, audio.sample_rate))
    print(f"wrote {args.out} ({est.size} samples)")


def _cmd_eval(args):
    per_row, summary = tr.evaluate_checkpoint(args.ckpt, args.manifest, args.out_csv)
    for row in summary:
        print(f"SNR {row['snr_db']:+g} dB: n={row['count']} errors={row['errors']} "
              f"SNR {row['snr_in']:.2f} -> {row['snr_out']:.2f}  "
              f"SI-SDR {row['si_sdr_in']:.2f} -> {row['si_sdr_out']:.2f}")
    failed = sum(1 for r in per_row if r["error"])
    if failed == len(per_row):
        raise RuntimeError("no manifest row could be evaluated")


def _parse_snrs(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"--snrs expects comma separated numbers, got {text!r}")


def _cmd_synth(args):
    snrs = _parse_snrs(args.snrs) if args.snrs else dm.TRAIN_SNRS
    mixes = dm.synth_dataset(args.seed, args.count, args.duration, snrs)
    manifest = dm.write_dataset(args.out_dir, mixes)
    print(f"wrote {len(mixes)} mixtures; manifest {manifest}")


def _cmd_spectrogram(args):
    audio = dm.wav_read(args.inp)
    pgm, csv_path = sig.export_spectrogram(audio.samples, args.frame_ms, args.out,
                                           sample_rate=audio.sample_rate)
    print(f"wrote {pgm} and {csv_path}")


def attention_image(weights):
    """Gray image of one attention map, drawn like a plot with the origin at
    the bottom left: x is the query frame, y the attended frame. Zero weight
    (masked) is black and the largest weight white, so a causal map is black
    above the rising diagonal."""
    w = np.asarray(weights, dtype=np.float64)
    top = w.max()
    if top <= 0.0:
        return np.zeros(w.shape, dtype=np.uint8)
    # w[i, j]: query i attends to j -> pixel (row T-1-j, column i)
    return np.round(255.0 * w.T[::-1] / top).astype(np.uint8)


def _cmd_attention(args):
    model, _, _ = load_model(args.ckpt)
    audio = dm.wav_read(args.inp)
    maps = attention_maps(model, audio.samples)
    if not 0 <= args.layer < len(maps):
        raise UsageError(f"--layer must be in 0..{len(maps) - 1}, got {args.layer}")
    sig.write_pgm(args.out, attention_image(maps[args.layer]))
    print(f"wrote {args.out} ({maps[args.layer].shape[0]} frames)")


def _cmd_ablate(args):
    axes = tuple(a.strip() for a in args.grid.split(",") if a.strip())
    bad = [a for a in axes if a not in tr.ABLATION_AXES]
    if bad or not axes:
        raise UsageError(f"--grid takes a subset of {','.join(tr.ABLATION_AXES)}, got {args.grid!r}")
    causal = {"causal": (True,), "noncausal": (False,), "both": (True, False)}[args.causal]
    rows = []
    for flag in causal:
        rows += tr.run_ablation(axes, causal=flag, steps=args.steps, seed=args.seed,
                                progress=lambda r: print(
                                    f"causal={r['causal']} m={r['m']} dilation={r['dilation']} "
                                    f"attention={r['attention']} loss={r['final_loss']:.4g}"))
    tr._write_csv(args.out_csv, tr.ABLATION_FIELDS,
                  [[r[k] for k in tr.ABLATION_FIELDS] for r in rows])
    print(f"wrote {args.out_csv} ({len(rows)} rows)")


def build_parser():
    p = _Parser(prog="dcnse", description="Time-domain speech enhancement with a dense "
                                          "convolutional network.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("train", help="train from a key=value config file")
    s.add_argument("--config", required=True)
    s.add_argument("--resume", help="training checkpoint to continue from")
    s.add_argument("--checkpoint-dir", help="override train.checkpoint_dir")
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("enhance", help="enhance one WAV file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_enhance)

    s = sub.add_parser("eval", help="score a checkpoint on a manifest")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out-csv", required=True)
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("synth-data", help="write a synthetic mixture corpus")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--snrs", help="comma separated SNRs in dB, e.g. --snrs=-5,0,5 (default -5..0)")
    s.add_argument("--duration", type=float, default=2.0, help="seconds per utterance")
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("spectrogram", help="export a spectrogram image and CSV")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--frame-ms", type=int, choices=(32, 64), required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_spectrogram)

    s = sub.add_parser("attention-map", help="render one attention map as PGM")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--layer", type=int, required=True,
                   help="attention module index, encoder first")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_attention)

    s = sub.add_parser("ablate", help="short training runs over a config grid")
    s.add_argument("--grid", required=True, help="axes, e.g. m,dilation,attention")
    s.add_argument("--out-csv", required=True)
    s.add_argument("--steps", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--causal", choices=("causal", "noncausal", "both"), default="causal")
    s.set_defaults(func=_cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"dcnse {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, CheckpointError) as exc:
        print(f"dcnse {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
