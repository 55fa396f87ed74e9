"""Command-line entry point: ``ultratts <subcommand> ...``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace

import numpy as np

from .errors import ConfigError, DivergedError, UltraTTSError

log = logging.getLogger("ultratts")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _bool(s):
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _csv(s):
    return [x for x in s.split(",") if x]


_TYPES = {"speakers": _csv, "lexicon": str, "inventory": str, "codec_max_frames": int,
          "figures": _bool}


def _add_config_flags(p):
    from .nn import LstmConfig, MlpConfig
    from .pipeline import PipelineConfig

    p.add_argument("--config", help="JSON config file; flags override its values")
    defaults = PipelineConfig()
    for f in fields(PipelineConfig):
        if f.name in ("mlp", "lstm"):
            continue
        typ = _TYPES.get(f.name) or type(getattr(defaults, f.name))
        p.add_argument(f"--{f.name}", dest=f.name, type=typ, default=None)
    for prefix, cls in (("mlp", MlpConfig), ("lstm", LstmConfig)):
        for f in fields(cls):
            typ = type(getattr(cls(), f.name))
            p.add_argument(f"--{prefix}.{f.name}", dest=f"{prefix}.{f.name}", type=typ,
                           default=None)


def config_from_args(args):
    from .pipeline import PipelineConfig, load_config

    cfg = load_config(args.config) if args.config else PipelineConfig()
    top, mlp, lstm = {}, {}, {}
    for key, value in vars(args).items():
        if value is None or key in ("config", "cmd", "func", "verbose"):
            continue
        if key.startswith("mlp."):
            mlp[key[4:]] = value
        elif key.startswith("lstm."):
            lstm[key[5:]] = value
        elif key in {f.name for f in fields(PipelineConfig)}:
            top[key] = value
    cfg = replace(cfg, **top)
    if mlp:
        cfg.mlp = replace(cfg.mlp, **mlp)
    if lstm:
        cfg.lstm = replace(cfg.lstm, **lstm)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_corpus(args):
    from .corpus import SynthCorpusConfig, write_synthetic_corpus

    names = args.speakers
    if names.isdigit():
        names = [f"spk{i + 1:02d}" for i in range(int(names))]
    else:
        names = _csv(names)
    for i, spk in enumerate(names):
        cfg = SynthCorpusConfig(seed=args.seed + i, n_utterances=args.n_utterances, speaker=spk,
                                smoothing_width=args.smoothing_width,
                                noise_level=args.noise_level,
                                raw_shape=(64, args.samples_per_line))
        ids = write_synthetic_corpus(args.out, cfg)
        print(f"{spk}\t{len(ids)} utterances\t{args.out}")


def cmd_prepare(args):
    from .pipeline import cmd_prepare as run

    cfg = config_from_args(args)
    for spk, info in run(cfg).items():
        train, dev, test = info["split"]
        codec = info["codec"]
        print(f"{spk}\tcomponents={codec.n_components}\t"
              f"variance={codec.explained_share.sum():.4f}\t"
              f"split={len(train)}/{len(dev)}/{len(test)}")


def cmd_train(args):
    from .pipeline import cmd_train as run

    cfg = config_from_args(args)
    for spk, reports in run(cfg, cfg.model).items():
        for role, rep in reports.items():
            print(f"{spk}\t{cfg.model}\t{role}\tepochs={rep['epochs_run']}\t"
                  f"best_epoch={rep['best_epoch']}\tbest_dev={rep['best_dev_loss']:.6g}")


def cmd_synthesize(args):
    from .pipeline import cmd_synthesize as run

    cfg = config_from_args(args)
    speaker = args.speaker or (cfg.speakers[0] if cfg.speakers else None)
    if speaker is None:
        from .pipeline import speakers_for
        speaker = speakers_for(cfg)[0]
    res = run(cfg, speaker, args.out, text=args.text, reference=args.reference,
              name=args.name)
    print(f"{speaker}\tframes={res['acoustic'].n_frames}\tphones={len(res['phones'])}\t"
          f"files={len(res['files'])}\t{args.out}")


def cmd_evaluate(args):
    from .pipeline import cmd_evaluate as run

    cfg = config_from_args(args)
    kinds = _csv(args.models) if args.models else [cfg.model]
    rows, baseline = run(cfg, kinds, args.out)
    print("speaker\tsystem\tpart\tMCD_dB\tULTPCA_RMSE")
    for spk in sorted(rows):
        for kind in kinds:
            for part in ("dev", "test"):
                r = rows[spk][kind][part]
                print(f"{spk}\t{kind}\t{part}\t{r.mcd:.3f}\t{r.rmse:.3f}")
        for part in ("dev", "test"):
            r = baseline[spk]["mean"][part]
            print(f"{spk}\tmean\t{part}\t{r.mcd:.3f}\t{r.rmse:.3f}")


def cmd_export_video(args):
    from .codec import WedgeGeometry, decode, encode, load_codec, resize_bicubic
    from .corpus import export_video_frames, import_raw_ultrasound
    from .features import read_fmtx

    geometry = WedgeGeometry(args.field_of_view, args.zero_offset, args.wedge_height,
                             args.wedge_width)
    if bool(args.ult) == bool(args.fmtx):
        raise ConfigError("give exactly one of --ult or --fmtx")
    if args.ult:
        param = args.param or os.path.splitext(args.ult)[0] + ".param"
        frames, fps = import_raw_ultrasound(args.ult, param)
        frames = frames.astype(float)
        if args.codec:
            codec = load_codec(args.codec)
            raw_shape = frames.shape[1:]
            coeffs = encode(codec, resize_bicubic(frames, *codec.shape))
            frames = resize_bicubic(decode(codec, coeffs), *raw_shape)
    else:
        if not args.codec:
            raise ConfigError("--fmtx needs --codec to reconstruct frames")
        codec = load_codec(args.codec)
        fm = read_fmtx(args.fmtx)
        coeffs = fm.stream("ultpca", "static") if "ultpca" in fm.layout else fm.frames
        frames = resize_bicubic(decode(codec, coeffs), 64, args.samples_per_line)
        fps = 1.0 / fm.frame_shift
    if args.fps:
        fps = args.fps
    paths = export_video_frames(frames, geometry, args.out, args.stride, 1.0 / fps)
    if args.png:
        from .plotting import plot_video_strip
        plot_video_strip({args.label: frames}, geometry, args.png, stride=args.stride)
    print(f"{len(paths)} frames\t{args.out}")


def cmd_plot_coeffs(args):
    from .corpus import plot_coefficient_trajectories
    from .features import read_fmtx

    def load(path):
        fm = read_fmtx(path)
        arr = fm.stream("ultpca", "static") if "ultpca" in fm.layout else fm.frames
        return arr, fm.frame_shift

    orig, shift = load(args.original)
    preds = {}
    for item in args.pred or []:
        name, _, path = item.partition("=")
        if not path:
            raise ConfigError(f"--pred expects name=path, got {item!r}")
        preds[name] = load(path)[0]
    dims = [int(d) for d in _csv(args.dims)] if args.dims else None
    header, table = plot_coefficient_trajectories(orig, preds, args.out, dims, shift)
    if args.png:
        from .plotting import plot_trajectory_table
        plot_trajectory_table(header, table, args.png)
    print(f"{len(header) - 1} columns x {len(table)} frames\t{args.out}")


def build_parser():
    p = _Parser(prog="ultratts", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-corpus", help="write a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--speakers", default="1", help="count or comma-separated names")
    g.add_argument("--n_utterances", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise_level", type=float, default=0.05)
    g.add_argument("--smoothing_width", type=int, default=9)
    g.add_argument("--samples_per_line", type=int, default=842)
    g.set_defaults(func=cmd_gen_corpus)

    for name, func, helptext in (("prepare", cmd_prepare, "fit codec, build features"),
                                 ("train", cmd_train, "train duration + acoustic models"),
                                 ("synthesize", cmd_synthesize, "text -> features + video"),
                                 ("evaluate", cmd_evaluate, "MCD / ULT-PCA RMSE tables")):
        s = sub.add_parser(name, help=helptext)
        _add_config_flags(s)
        s.set_defaults(func=func)
        if name == "synthesize":
            s.add_argument("--text")
            s.add_argument("--reference", help="utterance id; uses its original timing")
            s.add_argument("--speaker")
            s.add_argument("--name")
            s.add_argument("--out", required=True)
        if name == "evaluate":
            s.add_argument("--models", help="comma-separated, e.g. fcdnn,lstm")
            s.add_argument("--out")

    e = sub.add_parser("export-video", help="wedge-rendered PGM frames")
    e.add_argument("--ult")
    e.add_argument("--param")
    e.add_argument("--fmtx")
    e.add_argument("--codec")
    e.add_argument("--out", required=True)
    e.add_argument("--stride", type=int, default=3)
    e.add_argument("--fps", type=float)
    e.add_argument("--samples_per_line", type=int, default=842)
    e.add_argument("--field_of_view", type=float, default=92.0)
    e.add_argument("--zero_offset", type=float, default=50.0)
    e.add_argument("--wedge_height", type=int, default=360)
    e.add_argument("--wedge_width", type=int, default=520)
    e.add_argument("--png", help="also render a frame strip figure")
    e.add_argument("--label", default="frames")
    e.set_defaults(func=cmd_export_video)

    c = sub.add_parser("plot-coeffs", help="coefficient trajectory table (+ figure)")
    c.add_argument("--original", required=True)
    c.add_argument("--pred", action="append", help="name=path.fmtx, repeatable")
    c.add_argument("--dims", help="1-based, comma-separated; default 1,2,4,...,128")
    c.add_argument("--out", required=True)
    c.add_argument("--png")
    c.set_defaults(func=cmd_plot_coeffs)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UltraTTSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return DivergedError.exit_code
    except (json.JSONDecodeError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
