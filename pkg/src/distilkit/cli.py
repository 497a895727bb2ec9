"""``distilkit`` command line: preprocess, build-vocab, pretrain, finetune, benchmark, verify.

Exit codes: 0 success, 1 verification failure, 2 usage, configuration or I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import verify as verify_mod
from .config import ConfigError, RunConfig, load_config, profile_text
from .corpus import VocabError, batches, build_vocab, preprocess_file, read_lines, Vocab
from .distill import TrainingDivergedError, pretrain, train_mlm
from .finetune import (DatasetError, LabeledDataset, benchmark_pair, load_classification_tsv,
                       load_conll, run_task, write_conll)
from .model import (CheckpointError, EncoderModel, init_student_from_teacher, load_checkpoint,
                    save_checkpoint)
from .synthetic import grammar_corpus, grammar_tagged

log = logging.getLogger("distilkit")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Reported on stderr with exit code 2."""


def _need_file(path: Path, what: str) -> Path:
    if not Path(path).is_file():
        raise UsageError(f"no such file: {path} ({what})")
    return Path(path)


def _config(args) -> RunConfig:
    if args.config not in ("full", "desk"):
        _need_file(Path(args.config), "config")
    cfg = load_config(args.config)
    return cfg.with_overrides(seed=getattr(args, "seed", None),
                              epochs=getattr(args, "epochs", None),
                              max_steps=getattr(args, "max_steps", None),
                              word_limit=getattr(args, "word_limit", None))


def _load_model(path: Path, what: str) -> EncoderModel:
    return load_checkpoint(_need_file(path, what))


def _load_task_data(entry) -> tuple[LabeledDataset, LabeledDataset | None]:
    _need_file(entry.train, f"task {entry.name} train data")
    if entry.format == "conll":
        train = load_conll(entry.train)
        test = None
        if entry.test is not None:
            test_raw = load_conll(_need_file(entry.test, f"task {entry.name} test data"))
            names = list(train.label_names)
            for name in test_raw.label_names:
                if name not in names:
                    names.append(name)
            pairs = [(t, [test_raw.label_names[i] for i in labs]) for t, labs in test_raw.examples]
            train = LabeledDataset(train.kind, train.examples, names)
            test = LabeledDataset.from_token_pairs(pairs, names)
        return train, test
    if entry.split is not None:
        return load_classification_tsv(entry.train,
                                       _need_file(entry.split, f"task {entry.name} split"))
    data = load_classification_tsv(entry.train)
    if entry.test is None:
        return data, None
    raise UsageError(f"task {entry.name}: tsv tasks take a split file, not a test path")


# ---------------------------------------------------------------- commands

def cmd_synthesize(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "corpus.txt").write_text(
        "".join(s + "\n" for s in grammar_corpus(args.sentences, args.seed)), encoding="utf-8")
    write_conll(grammar_tagged(args.tagged, args.seed + 1), out / "pos.conll")
    (out / "config.ini").write_text(profile_text("desk"), encoding="utf-8")
    print(f"wrote {out / 'corpus.txt'}, {out / 'pos.conll'} and {out / 'config.ini'}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    if args.input is None or args.output is None:
        cfg = _config(args)
        src = args.input or cfg.paths["corpus"]
        dst = args.output or cfg.paths["processed"]
        limit = cfg.word_limit
    else:
        src, dst = Path(args.input), Path(args.output)
        limit = 400 if args.word_limit is None else args.word_limit
    _need_file(Path(src), "input corpus")
    Path(dst).parent.mkdir(parents=True, exist_ok=True)
    stats = preprocess_file(src, dst, limit)
    sys.stdout.write(stats.to_text())
    return EXIT_OK


def cmd_build_vocab(args) -> int:
    cfg = _config(args)
    src = Path(args.corpus) if args.corpus else cfg.paths["processed"]
    dst = Path(args.output) if args.output else cfg.paths["vocab"]
    size = args.size or cfg.teacher.vocab_size
    vocab = build_vocab(read_lines(_need_file(src, "preprocessed corpus")), size)
    dst.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(dst)
    print(f"vocabulary: {len(vocab)} tokens -> {dst}")
    return EXIT_OK


def _corpus(cfg: RunConfig) -> tuple[list[str], Vocab]:
    vocab = Vocab.load(_need_file(cfg.paths["vocab"], "vocabulary"))
    if len(vocab) > cfg.teacher.vocab_size:
        raise UsageError(f"vocabulary has {len(vocab)} tokens but the model holds "
                         f"{cfg.teacher.vocab_size}")
    sentences = list(read_lines(_need_file(cfg.paths["processed"], "preprocessed corpus")))
    return sentences, vocab


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    sentences, vocab = _corpus(cfg)
    ckpt_dir = cfg.paths["checkpoints"]
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if args.init_teacher:
        teacher = EncoderModel(cfg.teacher, seed=cfg.seed)
        init = cfg.teacher_init
        if init.mlm_steps:
            log.info("training toy teacher for %d MLM steps", init.mlm_steps)
            data = batches(sentences, vocab, cfg.teacher.max_seq_len, init.batch_size)
            train_mlm(teacher, data, init.mlm_steps, init.learning_rate, cfg.seed,
                      cfg.pretrain.mask_prob)
        cfg.paths["teacher"].parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(teacher, cfg.paths["teacher"])
    else:
        teacher = _load_model(cfg.paths["teacher"], "teacher checkpoint")
    if teacher.config.num_layers != cfg.teacher.num_layers:
        raise UsageError(f"teacher checkpoint has {teacher.config.num_layers} layers, config "
                         f"says {cfg.teacher.num_layers}")
    if cfg.student.num_layers * 2 == teacher.config.num_layers:
        student = init_student_from_teacher(teacher)
    else:
        # only reachable with allow_depth_override; layer copying needs exactly half depth
        logging.getLogger(__name__).warning(
            "student depth %d is not half of %d: starting from random weights",
            cfg.student.num_layers, teacher.config.num_layers)
        student = EncoderModel(cfg.student, seed=cfg.seed)
    save_checkpoint(student, ckpt_dir / "student_init.ckpt")
    if cfg.pretrain.epochs == 0:
        print(f"epochs = 0: wrote {ckpt_dir / 'student_init.ckpt'} only")
        return EXIT_OK
    data = batches(sentences, vocab, cfg.teacher.max_seq_len, cfg.pretrain.batch_size)
    result = pretrain(student, teacher, data, cfg.pretrain, cfg.weights, checkpoint_dir=ckpt_dir)
    save_checkpoint(student, cfg.paths["student"])
    result.write_log(ckpt_dir / "pretrain.log")
    last = result.log[-1]
    print(f"pretrain: {len(result.log)} steps, final total loss {last.total:.6f}; "
          f"student -> {cfg.paths['student']}")
    return EXIT_OK


def _model_for(cfg: RunConfig, which: str) -> EncoderModel:
    if which in ("student", "teacher"):
        return _load_model(cfg.paths[which], f"{which} checkpoint")
    return _load_model(Path(which), "checkpoint")


def cmd_finetune(args) -> int:
    cfg = _config(args)
    entry = cfg.task(args.task)
    vocab = Vocab.load(_need_file(cfg.paths["vocab"], "vocabulary"))
    model = _model_for(cfg, args.model)
    train, test = _load_task_data(entry)
    spec = entry.spec(train.num_labels)
    name = args.model if args.model in ("student", "teacher") else Path(args.model).stem
    report = run_task(model, train, test, spec, vocab, cfg.seed, name, args.runs)
    out = cfg.paths["reports"]
    out.mkdir(parents=True, exist_ok=True)
    base = out / f"{entry.name}.{name}"
    Path(f"{base}.report.txt").write_text(f"task: {entry.name}\n" + report.score_lines(),
                                          encoding="utf-8")
    Path(f"{base}.timing.txt").write_text(report.timing_lines(), encoding="utf-8")
    print(f"{entry.name} {name}: F1 {report.f1:.4f} -> {base}.report.txt")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    cfg = _config(args)
    entry = cfg.task(args.task)
    vocab = Vocab.load(_need_file(cfg.paths["vocab"], "vocabulary"))
    student = _model_for(cfg, args.student or "student")
    teacher = _model_for(cfg, args.teacher or "teacher")
    train, test = _load_task_data(entry)
    spec = entry.spec(train.num_labels)
    result = benchmark_pair(student, teacher, train, test, spec, vocab, cfg.seed, args.runs,
                            entry.name)
    paths = result.write(cfg.paths["reports"])
    sys.stdout.write(result.table)
    print(f"report -> {paths['report']}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify_mod.run_all(quick=args.quick)
    for r in results:
        print(r.line())
        for f in r.failures[:5]:
            print(f"    {f}")
    ok = all(r.ok for r in results)
    print("verify: all suites passed" if ok else "verify: FAILED")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_config(args) -> int:
    text = _config(args).to_text()
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distilkit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, seed=True):
        sp.add_argument("--config", default="desk",
                        help="INI file or shipped profile name (full, desk); default desk")
        if seed:
            sp.add_argument("--seed", type=int, help="override [run] seed")
        return sp

    sp = sub.add_parser("synthesize", help="write a seeded desk-scale corpus, tag data and config")
    sp.add_argument("out_dir")
    sp.add_argument("--sentences", type=int, default=500)
    sp.add_argument("--tagged", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synthesize)

    sp = with_config(sub.add_parser("preprocess", help="split long sentences, write stats"), False)
    sp.add_argument("input", nargs="?", help="raw corpus (default: [paths] corpus)")
    sp.add_argument("output", nargs="?", help="split corpus (default: [paths] processed)")
    sp.add_argument("--word-limit", type=int)
    sp.set_defaults(func=cmd_preprocess)

    sp = with_config(sub.add_parser("build-vocab", help="frequency-ranked word vocabulary"), False)
    sp.add_argument("--corpus")
    sp.add_argument("--output")
    sp.add_argument("--size", type=int, help="default: teacher vocab_size")
    sp.set_defaults(func=cmd_build_vocab)

    sp = with_config(sub.add_parser("pretrain", help="distil the teacher into a student"))
    sp.add_argument("--init-teacher", action="store_true",
                    help="seed a toy teacher (plus init_mlm_steps of MLM) instead of loading one")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--max-steps", type=int)
    sp.set_defaults(func=cmd_pretrain)

    sp = with_config(sub.add_parser("finetune", help="fine-tune one model on a task"))
    sp.add_argument("--task", required=True)
    sp.add_argument("--model", default="student", help="student, teacher or a checkpoint path")
    sp.add_argument("--runs", type=int, default=1)
    sp.set_defaults(func=cmd_finetune)

    sp = with_config(sub.add_parser("benchmark", help="student vs teacher comparison table"))
    sp.add_argument("--task", required=True)
    sp.add_argument("--runs", type=int, default=3)
    sp.add_argument("--student", help="checkpoint path (default: [paths] student)")
    sp.add_argument("--teacher", help="checkpoint path (default: [paths] teacher)")
    sp.set_defaults(func=cmd_benchmark)

    sp = sub.add_parser("verify", help="gradient checks, loss and F1 oracles, splitter fuzz")
    sp.add_argument("--quick", action="store_true", help="fewer seeds for the op checks")
    sp.set_defaults(func=cmd_verify)

    sp = with_config(sub.add_parser("config", help="print the effective configuration"))
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"distilkit: no such file: {exc.filename}", file=sys.stderr)
    except (UsageError, ConfigError, DatasetError, VocabError, CheckpointError) as exc:
        print(f"distilkit: {exc}", file=sys.stderr)
    except TrainingDivergedError as exc:
        print(f"distilkit: training diverged: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
