"""Command-line interface: ``retts <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from retts.config import ConfigError, load_config
from retts.data import find_utterance, gen_corpus, load_corpus, parse_phonemes
from retts.io import FormatError, load_checkpoint, load_matrix, save_matrix
from retts.model import ModelConfig, PhonemeSequence, InsertionTTS

log = logging.getLogger("retts")


class UsageError(Exception):
    """Flag combination that parses but cannot run."""


def _setup_logging() -> None:
    level = os.environ.get("RETTS_LOG_LEVEL", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def load_model(path) -> InsertionTTS:
    ckpt = load_checkpoint(path)
    model = InsertionTTS(ModelConfig(**ckpt.model_config))
    model.load_state_dict(ckpt.model_state())
    return model.eval()


def _parse_words(text: str) -> list[list[int]]:
    """``"3,4 7,8,9"`` -> [[3, 4], [7, 8, 9]]; ``|`` also separates words."""
    words = [w for w in text.replace("|", " ").split() if w]
    if not words:
        raise UsageError("no words given")
    try:
        return [[int(t) for t in w.split(",")] for w in words]
    except ValueError as exc:
        raise UsageError(f"words must be comma-separated phoneme ids: {text!r}") from exc


def _corpus_dir(args, utt_path: str | None = None) -> Path:
    if args.data:
        return Path(args.data)
    if utt_path:
        guess = Path(utt_path).resolve().parent.parent
        if (guess / "manifest.tsv").exists():
            return guess
    raise UsageError("--data is required to locate the corpus manifest")


def _reference(args, fallback: np.ndarray | None) -> np.ndarray:
    if args.ref:
        ref = Path(args.ref)
        if ref.suffix == ".feat" or ref.exists():
            return load_matrix(ref)
        return find_utterance(_corpus_dir(args), args.ref).ref_feature
    if fallback is None:
        raise UsageError("--ref is required")
    return fallback


# -- subcommands -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    mc, _ = load_config(args.config) if args.config else (ModelConfig(), None)
    utts = gen_corpus(args.out, args.speakers, args.utts, args.seed, mc.n_mels, mc.feature_dim,
                      mc.phoneme_vocab)
    print(f"wrote {len(utts)} utterances from {args.speakers} speakers to {args.out}")
    return 0


def cmd_train(args) -> int:
    from retts.io import CompatibilityError, check_compatible
    from retts.plotting import plot_losses
    from retts.training import Trainer

    mc, tc = load_config(args.config)
    if args.stage == 2 and not args.init:
        raise UsageError("stage 2 needs --init pointing at a stage-1 checkpoint")
    data = load_corpus(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = InsertionTTS(mc, seed=args.seed)
    trainer = None
    if args.init:
        ckpt = load_checkpoint(args.init)
        check_compatible(ckpt.model_config, mc.to_dict())
        stage_of_ckpt = ckpt.meta.get("stage")
        if args.stage == 2 and stage_of_ckpt not in (1, 2):
            raise CompatibilityError(f"{args.init} is not a training checkpoint")
        if stage_of_ckpt == args.stage:
            trainer = Trainer(model, tc, data, args.stage, seed=args.seed, log_path=out / "metrics.log")
            trainer.restore(ckpt)
            log.info("resuming stage %d at step %d", args.stage, trainer.step)
        else:
            model.load_state_dict(ckpt.model_state())
    if trainer is None:
        trainer = Trainer(model, tc, data, args.stage, seed=args.seed, log_path=out / "metrics.log")
    steps = args.steps or (tc.stage1_total if args.stage == 1 else tc.stage2_steps)
    records = trainer.run(steps, tc.checkpoint_every, out)
    if records:
        plot_losses(records, out / f"stage{args.stage}_losses.png")
        last = records[-1]
        print("\t".join(f"{k}={v}" for k, v in last.items()))
    return 0


def cmd_synth(args) -> int:
    from retts.inference import generate_full
    from retts.plotting import plot_mel

    model = load_model(args.model)
    text = PhonemeSequence.from_words(_parse_words(args.text))
    ref = _reference(args, None)
    mel, durations = generate_full(text, ref, model, return_durations=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_matrix(out / "synth.mel", mel.astype(np.float32))
    (out / "durations.txt").write_text("\n".join(str(int(d)) for d in durations) + "\n", encoding="utf-8")
    plot_mel(mel, out / "synth.png", "generated")
    print(f"frames\t{mel.shape[0]}")
    return 0


def cmd_insert(args) -> int:
    from retts.inference import insert_words, make_insertion_request
    from retts.plotting import plot_mel

    model = load_model(args.model)
    utt = find_utterance(_corpus_dir(args, args.utt), args.utt)
    mel = load_matrix(args.utt) if Path(args.utt).suffix == ".mel" and Path(args.utt).exists() else utt.mel
    req = make_insertion_request(mel, utt.phonemes, utt.prosody, args.at_word, _parse_words(args.words))
    result = insert_words(req, model, _reference(args, utt.ref_feature))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if result.plan.insert_frames:
        save_matrix(out / "segment.mel", result.segment.astype(np.float32))
    save_matrix(out / "full.mel", result.full_mel)
    (out / "plan.txt").write_text(result.plan.to_text(), encoding="utf-8")
    left = result.plan.left_frames
    plot_mel(result.full_mel, out / "full.png", "context + insertion",
             boundaries=(left, left + result.plan.insert_frames))
    sys.stdout.write(result.plan.to_text())
    return 0


def cmd_gradcheck(args) -> int:
    from retts.evaluation import run_gradchecks

    mc, _ = load_config(args.config)
    results = run_gradchecks(mc, eps=args.eps, max_coords=args.max_coords or None, seed=args.seed)
    ok = True
    for name, err in results.items():
        passed = err < args.tol
        ok &= passed
        print(f"{name}\t{err:.3e}\t{'ok' if passed else 'FAIL'}")
    return 0 if ok else 1


def cmd_eval_speaker_sim(args) -> int:
    from retts.evaluation import pooled_tokens, speaker_similarity
    from retts.plotting import plot_similarity

    model = load_model(args.model)
    utts = load_corpus(args.data)
    vectors = pooled_tokens(model, [u.ref_feature for u in utts])
    result = speaker_similarity(vectors, [u.speaker for u in utts])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["id\tspeaker\t" + "\t".join(u.id for u in utts)]
    for u, row in zip(utts, result.matrix):
        rows.append(f"{u.id}\t{u.speaker}\t" + "\t".join(f"{v:.6f}" for v in row))
    (out / "similarity.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    plot_similarity(result.matrix, [f"spk{u.speaker}" for u in utts], out / "similarity.png")
    summary = (f"within_mean\t{result.within_mean:.6f}\nacross_mean\t{result.across_mean:.6f}\n"
               f"pair_accuracy\t{result.pair_accuracy:.6f}\n")
    (out / "summary.txt").write_text(summary, encoding="utf-8")
    sys.stdout.write(summary)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="retts", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic multi-speaker corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--speakers", type=int, default=4)
    p.add_argument("--utts", type=int, default=16, help="utterances per speaker")
    p.add_argument("--config", help="config whose n_mels/feature_dim/phoneme_vocab to use")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run stage-1 or stage-2 training")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p.add_argument("--steps", type=int, help="train until this global step")
    p.add_argument("--init", help="checkpoint to resume (same stage) or start stage 2 from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="generate a full sentence from a reference")
    p.add_argument("--model", required=True)
    p.add_argument("--text", required=True, help='words of phoneme ids, e.g. "3,4 7,8,9"')
    p.add_argument("--ref", required=True, help="reference .feat file or utterance id")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("insert", help="insert words into an utterance")
    p.add_argument("--model", required=True)
    p.add_argument("--utt", required=True, help="utterance .mel path or id")
    p.add_argument("--at-word", type=int, required=True, help="insert before this word index")
    p.add_argument("--words", required=True)
    p.add_argument("--ref", help="reference for the global tokens (default: the utterance itself)")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_insert)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and the model")
    p.add_argument("--config", default="gradcheck")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int, default=24,
                   help="coordinates probed per tensor (0 = all)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval-speaker-sim", help="cosine similarity of pooled global tokens")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_speaker_sim)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, FormatError, ValueError, KeyError, FileNotFoundError,
            RuntimeError) as exc:
        print(f"retts {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
