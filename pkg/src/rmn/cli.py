"""Command-line entry point: ``rmn <subcommand> ...``.

Exit codes: 0 ok, 1 verification or metric failure, 2 usage or data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from rmn import __version__

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("rmn")


class UsageError(Exception):
    """Bad flags or unusable input data; maps to exit code 2."""


def _write_echo(path: Path, command: str, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    echo = {"command": command, "version": __version__, **payload}
    path.write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")


def _echo_stderr(command: str, payload: dict) -> None:
    print("# config " + json.dumps({"command": command, **payload}, sort_keys=True), file=sys.stderr)


def _positive_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


def _load_data(path):
    from rmn.data import load_dataset

    try:
        return load_dataset(path)
    except (FileNotFoundError, ValueError) as exc:
        raise UsageError(f"cannot load data from {path}: {exc}") from None


def _load_model(path, vocab_size):
    from rmn.train import CheckpointMismatch, load_checkpoint

    try:
        return load_checkpoint(path, vocab_size)
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint not found: {exc.filename}") from None
    except CheckpointMismatch as exc:
        raise UsageError(f"checkpoint mismatch: {exc}") from None


def _pick_videos(dataset, video_ids):
    if not video_ids:
        return dataset.video_ids()
    missing = [v for v in video_ids if v not in dataset.features]
    if missing:
        raise UsageError(f"unknown video ids: {', '.join(missing)}")
    return video_ids


# ---------------------------------------------------------------------------
# synth-gen
# ---------------------------------------------------------------------------

def cmd_synth_gen(args) -> int:
    from rmn.data import SyntheticGrammar, dataset_from_videos, synth_generate, write_dataset

    grammar = SyntheticGrammar(sigma=args.sigma, n_frames=args.frames, n_regions=args.regions)
    try:
        videos = synth_generate(grammar, args.videos, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ds = dataset_from_videos(videos)
    out = Path(args.out)
    write_dataset(out, videos, ds.vocab)
    _write_echo(out / "synth_config.json", "synth-gen",
                {"videos": args.videos, "seed": args.seed, "grammar": asdict(grammar)})
    print(f"wrote {len(videos)} videos, vocabulary {len(ds.vocab)} to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / ablate
# ---------------------------------------------------------------------------

TRAIN_FLAGS = {
    # flag dest -> TrainConfig field
    "mode": "mode", "linguistic_loss": "linguistic", "lam": "lam", "tau": "tau",
    "epochs": "epochs", "seed": "seed", "workers": "workers", "batch_size": "batch_size",
    "lr": "lr", "d_h": "d_h", "val_beam": "val_beam",
}


def resolve_train_config(args):
    """Preset, then config file, then explicit flags; later layers win."""
    from rmn.train import PRESETS, TrainConfig

    base = PRESETS[args.preset].to_dict() if args.preset else TrainConfig().to_dict()
    if args.config:
        try:
            base.update(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    for dest, name in TRAIN_FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            base[name] = v
    try:
        return TrainConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None


EPOCH_HEADER = "epoch\tsetting\tlr\tloss_cap\tloss_pos\tlocate\trelate\tfunc\tsel_acc\tbleu4\tcider"


def _epoch_line(r: dict) -> str:
    h = r["selection_histogram"]
    return (f"{r['epoch']}\t{r['setting']}\t{r['lr']:.3g}\t{r['loss_cap']:.4f}\t{r['loss_pos']:.4f}\t"
            f"{h['Locate']}\t{h['Relate']}\t{h['Func']}\t{r['val']['selection_accuracy']:.3f}\t"
            f"{r['val']['bleu4']:.4f}\t{r['val']['cider']:.4f}")


def _render_run_figures(result, out: Path, title: str) -> list:
    from rmn.plotting import plot_selection_histogram, plot_training_curves

    return [
        plot_training_curves(result.history, out / "curves.png", title),
        plot_selection_histogram(result.history, out / "selection_histogram.png", title),
    ]


def _run_training(cfg, data, val, out: Path, figures: bool, data_path, val_path):
    from rmn.train import train

    _write_echo(out / "run_config.json", "train",
                {"train_config": cfg.to_dict(), "data": str(data_path),
                 "val": str(val_path) if val_path else None})
    print(EPOCH_HEADER, flush=True)
    result = train(cfg, data, val, out_dir=out, on_epoch=lambda r: print(_epoch_line(r), flush=True))
    if figures:
        _render_run_figures(result, out, f"RMN ({cfg.setting})")
    return result


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    data = _load_data(args.data)
    val = _load_data(args.val) if args.val else None
    out = Path(args.out)
    result = _run_training(cfg, data, val, out, not args.no_figures, args.data, args.val)
    print(f"# best CIDEr {result.best_cider:.4f} at epoch {result.best_epoch}; "
          f"discreteness violations {result.discreteness_violations}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    """Train all four selection/loss settings and compare module usage."""
    from rmn.plotting import plot_module_proportions
    from rmn.train import ABLATIONS

    data = _load_data(args.data)
    out = Path(args.out)
    summary, proportions = [], {}
    for name, (mode, ling) in ABLATIONS.items():
        args.mode, args.linguistic_loss = mode, ling
        cfg = resolve_train_config(args)
        sub = out / name.replace("+", "_")
        print(f"# setting {name}", flush=True)
        res = _run_training(cfg, data, None, sub, not args.no_figures, args.data, None)
        final = res.history[-1]
        summary.append({"setting": name, "loss_cap": final["loss_cap"], "loss_pos": final["loss_pos"],
                        "selection_accuracy": final["val"]["selection_accuracy"],
                        "bleu4": final["val"]["bleu4"], "cider": final["val"]["cider"],
                        "modules_used": int(sum(c > 0 for c in final["val"]["word_selection_histogram"]))})
        proportions[name] = final["val"]["word_selection_histogram"]
    gold = np.zeros(3)
    for s in data.samples:
        for lab in s.module_labels:
            gold[int(lab)] += 1
    proportions["gold"] = gold.tolist()
    with open(out / "ablation.tsv", "w") as fh:
        cols = list(summary[0])
        fh.write("\t".join(cols) + "\n")
        for row in summary:
            fh.write("\t".join(f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c]) for c in cols) + "\n")
    print((out / "ablation.tsv").read_text(), end="")
    if not args.no_figures:
        plot_module_proportions({k: proportions[k] for k in ("H", "H+L", "gold")}, out / "module_proportions.png")
    return EXIT_OK


# ---------------------------------------------------------------------------
# caption / trace / eval
# ---------------------------------------------------------------------------

def _decode(model, feats, beam):
    from rmn.inference import beam_decode

    return beam_decode(model, feats, beam=beam)[0]


def cmd_caption(args) -> int:
    data = _load_data(args.data)
    model, _ = _load_model(args.checkpoint, len(data.vocab))
    vids = _pick_videos(data, args.video)
    _echo_stderr("caption", {"checkpoint": str(args.checkpoint), "data": str(args.data), "beam": args.beam})
    lines = []
    for vid in vids:
        hyp = _decode(model, data.features[vid], args.beam)
        lines.append(f"{vid}\t{' '.join(data.vocab.decode(hyp.words))}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_trace(args) -> int:
    from rmn.inference import colorize, render_trace, trace_to_jsonl
    from rmn.plotting import plot_trace

    data = _load_data(args.data)
    model, _ = _load_model(args.checkpoint, len(data.vocab))
    vids = _pick_videos(data, args.video)
    _echo_stderr("trace", {"checkpoint": str(args.checkpoint), "data": str(args.data), "beam": args.beam})
    fig_dir = Path(args.figures) if args.figures else None
    if fig_dir:
        fig_dir.mkdir(parents=True, exist_ok=True)
    for vid in vids:
        records = render_trace(_decode(model, data.features[vid], args.beam), data.vocab)
        sys.stdout.write(trace_to_jsonl(records, vid))
        if args.color:
            print(colorize(records), file=sys.stderr)
        if fig_dir:
            plot_trace(records, fig_dir / f"{vid}.png", vid)
    return EXIT_OK


def _read_candidates(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise UsageError(f"{path}:{n}: expected 'video_id<TAB>caption'")
        out[parts[0]] = parts[1].split()
    return out


def cmd_eval(args) -> int:
    from rmn.metrics import evaluate_captions

    data = _load_data(args.data)
    refs = data.references()
    if args.candidates:
        cands = _read_candidates(args.candidates)
        missing = [v for v in cands if v not in refs]
        if missing:
            raise UsageError(f"candidates for unknown videos: {', '.join(missing[:5])}")
        source = {"candidates": str(args.candidates)}
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --candidates")
        model, _ = _load_model(args.checkpoint, len(data.vocab))
        cands = {v: data.vocab.decode(_decode(model, data.features[v], args.beam).words)
                 for v in data.video_ids()}
        source = {"checkpoint": str(args.checkpoint), "beam": args.beam}
    vids = list(cands)
    try:
        metrics = evaluate_captions([cands[v] for v in vids], [refs[v] for v in vids])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _echo_stderr("eval", {"data": str(args.data), **source})
    print("metric\tvalue")
    for k in ("bleu4", "rouge_l", "cider"):
        print(f"{k}\t{metrics[k]:.6f}")
    if args.out:
        _write_echo(Path(args.out), "eval", {"data": str(args.data), **source, "metrics": metrics,
                                             "videos": len(vids)})
    if args.min_cider is not None and metrics["cider"] < args.min_cider:
        print(f"# CIDEr {metrics['cider']:.4f} below threshold {args.min_cider}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------
# grad-check
# ---------------------------------------------------------------------------

def cmd_grad_check(args) -> int:
    from rmn.gradcheck import run_all

    results = run_all(seed=args.seed, max_entries=None if args.full else args.max_entries,
                      report=lambda line: print(line, flush=True))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser, with_mode: bool = True) -> None:
    p.add_argument("--data", required=True, help="directory with features/, captions.tsv, vocab.txt")
    p.add_argument("--out", required=True, help="output directory for logs, checkpoints and figures")
    p.add_argument("--config", help="JSON file with training settings; flags override it")
    p.add_argument("--preset", choices=("msvd", "msrvtt", "synthetic"))
    if with_mode:
        p.add_argument("--mode", choices=("hard", "soft"))
        p.add_argument("--linguistic-loss", type=_on_off, metavar="{on,off}")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--d-h", type=_positive_int)
    p.add_argument("--val-beam", type=_positive_int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=_positive_int)
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rmn", description="Module-selecting video caption decoder.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="write a synthetic feature corpus")
    p.add_argument("--videos", type=_positive_int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--frames", type=_positive_int, default=4)
    p.add_argument("--regions", type=_positive_int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train", help="train one setting")
    _add_train_flags(p)
    p.add_argument("--val", help="validation data directory (defaults to the training data)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train S, H, S+L and H+L and compare module usage")
    _add_train_flags(p, with_mode=False)
    p.set_defaults(func=cmd_ablate, mode=None, linguistic_loss=None)

    for name, fn, text in (("caption", cmd_caption, "print one caption per video"),
                           ("trace", cmd_trace, "print per-word module traces as JSON lines")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--video", action="append", help="restrict to this video id (repeatable)")
        p.add_argument("--beam", type=_positive_int, default=2)
        if name == "caption":
            p.add_argument("--out", help="also write the captions TSV here")
        else:
            p.add_argument("--color", action="store_true", help="module-colored sentence on stderr")
            p.add_argument("--figures", help="directory for one trace figure per video")
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="BLEU-4, ROUGE-L and CIDEr against the references in --data")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--candidates", help="TSV of video_id<TAB>caption to score instead of decoding")
    p.add_argument("--beam", type=_positive_int, default=2)
    p.add_argument("--out", help="write metrics and the run config as JSON here")
    p.add_argument("--min-cider", type=float, help="exit 1 if CIDEr falls below this")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference check of every backward rule")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-entries", type=_positive_int, default=40,
                   help="entries sampled per parameter in the end-to-end checks")
    p.add_argument("--full", action="store_true", help="check every entry (slower)")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"rmn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
