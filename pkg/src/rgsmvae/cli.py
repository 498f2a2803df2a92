"""Command-line entry point: ``rgsmvae {gen,train,convert,eval,check}``.

JSON lines go to stdout, a short human summary to stderr.  Exit codes are
0 ok, 1 verification failure, 2 usage or input error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checks, rgsm
from . import io as tio
from .corpus import by_speaker, generate, load_dir, read_corpus, write_corpus
from .errors import RgsmVaeError
from .metrics import conversion_accuracy, oracle_classifier, recon_mse
from .model import VoiceVAE, convert
from .train import NumericalAbort, RunConfig, Trainer, split_validation

log = logging.getLogger("rgsmvae")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

CHECKPOINT = "checkpoint.ckpt"
TRAIN_LOG = "train_log.jsonl"


class UsageError(Exception):
    pass


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


def _say(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def load_run_config(args) -> RunConfig:
    """Config file (or defaults) with ``--seed`` and ``--out`` applied."""
    run = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        run.corpus.seed = args.seed
        run.train.seed = args.seed
    if args.out is not None:
        run.out = args.out
    return run


def _out_dir(run: RunConfig) -> Path:
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(run: RunConfig, path: Path) -> None:
    path.write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n")


# --- commands -------------------------------------------------------------------

def cmd_gen(args) -> int:
    run = load_run_config(args)
    out = _out_dir(run)
    train, heldout = generate(run.corpus)
    write_corpus(out, train, heldout)
    _write_config(run, out / "config.json")
    _emit({"corpus": str(out), "train": len(train), "heldout": len(heldout)})
    _say(f"wrote {len(train)} train and {len(heldout)} held-out utterances to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = load_run_config(args)
    if args.no_rgsm:
        run.train.use_rgsm = False
    if args.no_attention:
        run.model.use_attention = False
    train_utts, _ = read_corpus(args.corpus)
    fit, val = split_validation(train_utts, run.train.val_utts_per_speaker)
    out = _out_dir(run)
    _write_config(run, out / "config.json")

    trainer = Trainer(run)
    _emit({"regularized": trainer.regularized_layers, "rgsm": run.train.use_rgsm,
           "attention": run.model.use_attention})
    # the output path is left out so reruns elsewhere give byte-identical checkpoints
    meta = {"run": {k: v for k, v in run.to_dict().items() if k != "out"}}
    t0 = time.perf_counter()
    with open(out / TRAIN_LOG, "w") as logf:
        def on_epoch(entry):
            line = json.dumps(entry, sort_keys=True)
            logf.write(line + "\n")
            logf.flush()
            _emit(entry)
            _say(f"epoch {entry['epoch']:3d}  total {entry['total']:.4f}  rec {entry['rec']:.4f}  "
                 f"kl {entry['kl']:.4f}  ({time.perf_counter() - t0:.0f}s)")

        try:
            trainer.fit(fit, val, on_epoch)
        except NumericalAbort as exc:
            trainer.model.params.load_arrays(exc.last_good)
            trainer.model.save(out / CHECKPOINT, meta)
            _say(f"numerical abort: {exc}; last good checkpoint kept at {out / CHECKPOINT}")
            return EXIT_NUMERIC
    trainer.model.save(out / CHECKPOINT, meta)
    report = trainer.sparsity()
    for r in report:
        _emit(r)
    _say(f"checkpoint {out / CHECKPOINT}; zero-group fraction {rgsm.zero_group_fraction(report):.4f}")
    return EXIT_OK


def _check_shapes(model: VoiceVAE, utts, what: str) -> None:
    want = (model.config.frames, model.config.mel_bins)
    for u in utts:
        if u.features.shape != want:
            raise UsageError(f"{what}: features {u.features.shape} do not match the model's {want}")


def cmd_convert(args) -> int:
    model, _ = VoiceVAE.load(args.checkpoint)
    sources, targets = load_dir(args.source), load_dir(args.target)
    if not sources or not targets:
        raise UsageError("convert: no source or target utterances found")
    _check_shapes(model, sources, "source")
    _check_shapes(model, targets, "target")
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    tgt = targets[0].speaker_id
    for u, feats in zip(sources, convert(model, sources, targets)):
        path = out / f"conv_s{u.speaker_id}_t{tgt}_c{u.content_id}.tnsr"
        tio.save_tensor(feats.astype(np.float32), path)
        _emit({"source": u.speaker_id, "target": tgt, "content": u.content_id, "path": str(path)})
    _say(f"converted {len(sources)} utterance(s) to speaker {tgt} in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = VoiceVAE.load(args.checkpoint)
    train_utts, heldout = read_corpus(args.corpus)
    _check_shapes(model, train_utts + heldout, "corpus")
    seen_utts = train_utts
    run = (meta or {}).get("run")
    if run:
        # seen speakers are scored on the utterances the model did not fit
        k = run["train"]["val_utts_per_speaker"]
        if k > 0:
            _, seen_utts = split_validation(train_utts, k)
    classifier = oracle_classifier if args.oracle else None
    acc = conversion_accuracy(model, by_speaker(seen_utts), by_speaker(heldout), args.utterances_per_pair,
                              classifier)
    result = {
        "seen_acc": acc["seen"],
        "unseen_acc": acc["unseen"],
        "recon_mse": recon_mse(model, seen_utts),
        "matrix": {"seen": acc["seen_matrix"], "unseen": acc["unseen_matrix"]},
    }
    text = json.dumps(result, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(text + "\n")
    sys.stdout.write(text + "\n")
    _say(f"seen accuracy {_fmt(acc['seen'])}, unseen accuracy {_fmt(acc['unseen'])}")
    return EXIT_OK


def _fmt(v):
    return "n/a" if v is None else f"{v:.3f}"


def cmd_check(args) -> int:
    names = args.suite or list(checks.SUITES)
    if args.inject:
        with checks.MUTATIONS[args.inject]():
            results = checks.run_suites(names)
    else:
        results = checks.run_suites(names)
    for r in results:
        _emit(r.to_dict())
        _say(f"{r.suite:9s} {'PASS' if r.passed else 'FAIL'}  cases={r.cases}  "
             f"max_error={r.max_error:.3g}  ({r.seconds:.1f}s)")
    failed = [r.suite for r in results if not r.passed]
    if failed:
        _say("failing suites: " + ", ".join(failed))
        return EXIT_VERIFY
    return EXIT_OK


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    def global_flags(p, default):
        p.add_argument("--config", default=default, help="JSON run config; missing fields take their defaults")
        p.add_argument("--seed", type=int, default=default, help="overrides corpus.seed and train.seed")
        p.add_argument("--out", default=default, help="output directory")

    parser = argparse.ArgumentParser(prog="rgsmvae",
                                     description="Structured-sparsity VAE voice conversion on a synthetic corpus.")
    global_flags(parser, None)
    # flags may also follow the subcommand; SUPPRESS keeps them from resetting earlier values
    common = argparse.ArgumentParser(add_help=False)
    global_flags(common, argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", parents=[common], help="write the synthetic corpus")

    p = sub.add_parser("train", parents=[common], help="train a model on a corpus")
    p.add_argument("--corpus", required=True, help="corpus directory written by 'gen'")
    p.add_argument("--no-rgsm", action="store_true", help="plain gradient descent, no pruning")
    p.add_argument("--no-attention", action="store_true", help="skip the decoder self-attention")

    p = sub.add_parser("convert", parents=[common], help="convert source utterances to a target speaker")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="TNSR file or directory of source utterances")
    p.add_argument("--target", required=True, help="TNSR file or directory of target-speaker utterances")

    p = sub.add_parser("eval", parents=[common], help="speaker-classification accuracy of conversions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--utterances-per-pair", type=int, default=10)
    p.add_argument("--oracle", action="store_true", help="harness smoke mode: the classifier always agrees")

    p = sub.add_parser("check", parents=[common], help="run the verification suites")
    p.add_argument("--suite", action="append", choices=sorted(checks.SUITES))
    p.add_argument("--inject", choices=sorted(checks.MUTATIONS), help="run with a deliberate bug")
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "convert": cmd_convert, "eval": cmd_eval, "check": cmd_check}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, RgsmVaeError, OSError, KeyError, ValueError) as exc:
        _say(f"error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
