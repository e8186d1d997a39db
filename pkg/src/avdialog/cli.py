"""Command-line surface: synthesize data, train, generate, localize evidence,
evaluate, and verify.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config
from .data import Corpus, build_decoder_context, build_vocabulary, generate_synthetic_corpus, \
    load_corpus, save_corpus
from .generation import beam_search, make_ensemble_step, make_step
from .metrics import ScoreReport, bleu4, cider_d, corpus_iou, rouge_l
from .model import AVSDModel, load_checkpoint, save_checkpoint
from .training import TrainingError, fit, make_items


class UsageError(Exception):
    pass


def _turn_key(video_id: str, turn: int) -> str:
    return f"{video_id}#{turn}"


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))


def _load_split(config: RunConfig, split: str) -> Corpus:
    path = config.dialog_path(split)
    if not path.exists():
        raise UsageError(f"dialog file {path} does not exist (run `avdialog synth` first?)")
    return load_corpus(path, config.feature_dir(), split)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(config: RunConfig, args) -> int:
    out = config.out()
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output root {out}: {exc}") from exc
    sizes = {
        "train": config.synth.num_videos,
        "validation": config.splits.val_videos,
        "test": config.splits.test_videos,
    }
    from dataclasses import replace
    for offset, (split, n) in enumerate(sizes.items()):
        spec = replace(config.synth, num_videos=n)
        corpus = generate_synthetic_corpus(spec, config.seed + offset, split)
        # feature files share one directory, so video ids carry the split
        corpus.samples = [replace(s, video_id=f"{split[:2]}_{s.video_id}")
                          for s in corpus.samples]
        corpus.features = {f"{split[:2]}_{k}": v for k, v in corpus.features.items()}
        save_corpus(corpus, config.dialog_path(split), config.feature_dir())
        print(f"wrote {split}: {n} dialogs, {corpus.num_turns()} turns")
    return 0


def _new_model(config: RunConfig, vocab, use_caption: bool) -> AVSDModel:
    from dataclasses import replace
    dec = replace(config.decoder, use_caption=use_caption)
    enc = replace(config.encoder)
    return AVSDModel(vocab, enc, dec, seed=config.seed)


def cmd_train(config: RunConfig, args) -> int:
    train = _load_split(config, "train")
    val = _load_split(config, "validation")
    vocab = build_vocabulary(train, config.vocab_min_count)
    ckpt_dir = config.out() / "checkpoints"
    role = args.role
    if role in ("teacher", "plain"):
        model = _new_model(config, vocab, use_caption=(role == "teacher"))
        result = fit({"model": model}, train, val, vocab, config.training, mode="ce")
        save_checkpoint(model, ckpt_dir / f"{role}.ckpt")
    else:  # student_jstl
        teacher_path = Path(args.teacher_checkpoint) if args.teacher_checkpoint \
            else ckpt_dir / "teacher.ckpt"
        if not teacher_path.exists():
            raise UsageError(f"student_jstl requires a teacher checkpoint at {teacher_path}")
        teacher = load_checkpoint(teacher_path)
        student = _new_model(config, teacher.vocab, use_caption=False)
        result = fit({"teacher": teacher, "student": student}, train, val,
                     teacher.vocab, config.training, mode="jstl")
        save_checkpoint(student, ckpt_dir / "student_jstl.ckpt")
        save_checkpoint(teacher, ckpt_dir / "teacher_jstl.ckpt")
    log_path = config.out() / "logs" / f"{role}.jsonl"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    log_path.write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in result.log))
    print(f"{role}: best validation loss {result.best_val:.4f} "
          f"({len(result.log)} epochs)")
    return 0


def cmd_train_rpn(config: RunConfig, args) -> int:
    from .reasoning import RegionProposalNetwork, rpn_dims, save_rpn_checkpoint, train_rpn

    model_path = Path(args.checkpoint) if args.checkpoint \
        else config.out() / "checkpoints" / "plain.ckpt"
    if not model_path.exists():
        raise UsageError(f"RPN training requires a dialog model checkpoint at {model_path}")
    model = load_checkpoint(model_path)
    train = _load_split(config, "train")
    import torch
    torch.manual_seed(config.seed)
    rpn = RegionProposalNetwork(config.encoder.d_a, config.encoder.d_v,
                                config.decoder.d, config.reasoning)
    log = train_rpn(rpn, model, train, model.vocab,
                    epochs=config.training.epochs,
                    learning_rate=config.training.learning_rate,
                    batch_size=config.training.batch_size,
                    seed=config.seed,
                    history_policy=config.training.history_policy)
    save_rpn_checkpoint(rpn, rpn_dims(model), config.out() / "checkpoints" / "rpn.ckpt")
    log_path = config.out() / "logs" / "rpn.jsonl"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    log_path.write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in log))
    print(f"rpn: final loss {log[-1]['train_loss']:.4f}")
    return 0


def _decode_corpus(models: list[AVSDModel], corpus: Corpus, config: RunConfig) -> dict[str, str]:
    vocab = models[0].vocab
    answers: dict[str, str] = {}
    gen = config.generation
    for sample in corpus.samples:
        streams_list = [m.encode(corpus.features[sample.video_id]) for m in models]
        for t in range(len(sample.turns)):
            ctx = vocab.encode(build_decoder_context(sample, t, config.training.history_policy))
            if len(models) == 1:
                step = make_step(models[0], ctx, streams_list[0])
            else:
                step = make_ensemble_step(models, ctx, streams_list)
            hyps = beam_search(step, vocab.eos_id, gen.beam, gen.max_len, gen.length_normalize)
            ids = hyps[0].answer(vocab.eos_id)
            answers[_turn_key(sample.video_id, t)] = " ".join(vocab.decode(ids))
    return answers


def cmd_generate(config: RunConfig, args) -> int:
    models = [load_checkpoint(p) for p in args.checkpoint]
    if len(models) == 2 and models[0].vocab != models[1].vocab:
        raise UsageError("ensemble checkpoints have mismatched vocabularies")
    if any(m.is_teacher for m in models):
        raise UsageError("generation uses caption-free models; got a teacher checkpoint")
    corpus = _load_split(config, args.split)
    answers = _decode_corpus(models, corpus, config)
    out_path = Path(args.out) if args.out else config.out() / f"generated_{args.split}.json"
    _write_json(out_path, {"answers": answers})
    print(f"wrote {len(answers)} answers to {out_path}")
    return 0


def cmd_reason(config: RunConfig, args) -> int:
    from .reasoning import load_rpn_checkpoint, localize_attention, localize_rpn

    model_path = Path(args.checkpoint) if args.checkpoint \
        else config.out() / "checkpoints" / "plain.ckpt"
    if not model_path.exists():
        raise UsageError(f"missing dialog model checkpoint {model_path}")
    model = load_checkpoint(model_path)
    rpn = None
    if args.method == "rpn":
        rpn_path = Path(args.rpn_checkpoint) if args.rpn_checkpoint \
            else config.out() / "checkpoints" / "rpn.ckpt"
        if not rpn_path.exists():
            raise UsageError(f"rpn method requires an RPN checkpoint at {rpn_path}")
        rpn = load_rpn_checkpoint(rpn_path)
    corpus = _load_split(config, args.split)
    vocab = model.vocab
    regions: dict[str, list[dict]] = {}
    for sample in corpus.samples:
        features = corpus.features[sample.video_id]
        for t in range(len(sample.turns)):
            ctx = vocab.encode(build_decoder_context(sample, t, config.training.history_policy))
            streams = model.encode(features)
            step = make_step(model, ctx, streams)
            from .generation import greedy_decode
            answer_ids = greedy_decode(step, vocab.eos_id, config.generation.max_len)
            if args.method == "attention":
                found = [localize_attention(model, features, ctx, answer_ids,
                                            config.reasoning.nu)]
            else:
                found = localize_rpn(rpn, model, features, ctx, answer_ids, config.reasoning)
            regions[_turn_key(sample.video_id, t)] = [
                {"start": r.start, "end": r.end, "confidence": r.confidence}
                for r in found
            ]
    out_path = Path(args.out) if args.out else \
        config.out() / f"reasons_{args.method}_{args.split}.json"
    _write_json(out_path, {"reasons": regions})
    print(f"wrote regions for {len(regions)} turns to {out_path}")
    return 0


def cmd_evaluate(config: RunConfig, args) -> int:
    from .data import TimeRegion

    corpus = _load_split(config, args.split)
    gt_answers: dict[str, list[str]] = {}
    gt_regions: dict[str, list[TimeRegion]] = {}
    frame_periods: dict[str, float] = {}
    durations: dict[str, float] = {}
    for sample in corpus.samples:
        features = corpus.features[sample.video_id]
        for t, turn in enumerate(sample.turns):
            key = _turn_key(sample.video_id, t)
            gt_answers[key] = [" ".join(turn.answer)]
            if sample.reasons is not None:
                gt_regions[key] = list(sample.reasons[t])
                frame_periods[key] = features.frame_period("visual")
                durations[key] = features.duration
    report = ScoreReport()
    if args.generated:
        candidates = json.loads(Path(args.generated).read_text())["answers"]
        missing = sorted(set(gt_answers) - set(candidates))
        if missing:
            raise UsageError(f"generated file lacks {len(missing)} turn ids, e.g. {missing[:5]}")
        candidates = {k: candidates[k] for k in gt_answers}
        report.corpus["BLEU4"] = bleu4(candidates, gt_answers)
        report.corpus["METEOR"] = "n/a"
        report.corpus["ROUGE_L"] = rouge_l(candidates, gt_answers)
        report.corpus["CIDEr-D"] = cider_d(candidates, gt_answers)
    if args.reasons:
        doc = json.loads(Path(args.reasons).read_text())["reasons"]
        missing = sorted(set(gt_regions) - set(doc))
        if missing:
            raise UsageError(f"reasons file lacks {len(missing)} turn ids, e.g. {missing[:5]}")
        predictions = {
            k: [TimeRegion(r["start"], r["end"], r.get("confidence")) for r in doc[k]]
            for k in gt_regions
        }
        i1, i2 = corpus_iou(predictions, gt_regions, frame_periods, durations)
        report.corpus["IoU-1"] = i1
        report.corpus["IoU-2"] = i2
    if not report.corpus:
        raise UsageError("nothing to evaluate: pass --generated and/or --reasons")
    out_path = Path(args.out) if args.out else config.out() / "scores.json"
    _write_json(out_path, {"scores": report.corpus})
    print(report.table())
    return 0


def cmd_verify(config: RunConfig, args) -> int:
    import tempfile

    from .verify import run_all

    results = run_all(tempfile.mkdtemp(prefix="avdialog_verify_"))
    failed = 0
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<28} {detail}")
        failed += not ok
    if failed:
        print(f"{failed}/{len(results)} checks failed")
        return 1
    print(f"all {len(results)} checks passed")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avdialog")
    parser.add_argument("--config", type=Path, help="YAML/JSON run configuration")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, repeatable")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="write a synthetic corpus")

    p = sub.add_parser("train", help="train a dialog model")
    p.add_argument("--role", choices=("teacher", "student_jstl", "plain"), required=True)
    p.add_argument("--teacher-checkpoint")

    p = sub.add_parser("train-rpn", help="train the region proposal network")
    p.add_argument("--checkpoint", help="dialog model checkpoint (default: plain)")

    p = sub.add_parser("generate", help="decode answers with beam search")
    p.add_argument("--checkpoint", action="append", required=True,
                   help="model checkpoint; give twice for a log-domain ensemble")
    p.add_argument("--split", default="validation")
    p.add_argument("--out")

    p = sub.add_parser("reason", help="localize evidence regions")
    p.add_argument("--method", choices=("attention", "rpn"), required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--rpn-checkpoint")
    p.add_argument("--split", default="validation")
    p.add_argument("--out")

    p = sub.add_parser("evaluate", help="score generated answers and regions")
    p.add_argument("--generated")
    p.add_argument("--reasons")
    p.add_argument("--split", default="validation")
    p.add_argument("--out")

    sub.add_parser("verify", help="run the verification check suite")
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "train-rpn": cmd_train_rpn,
    "generate": cmd_generate,
    "reason": cmd_reason,
    "evaluate": cmd_evaluate,
    "verify": cmd_verify,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config, args.override, args.seed)
        if len(getattr(args, "checkpoint", []) or []) > 2:
            raise UsageError("at most two checkpoints may be ensembled")
        return _COMMANDS[args.command](config, args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, OSError, ValueError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
