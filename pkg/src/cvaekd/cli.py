"""Command-line drivers: pretrain-teacher, train, generate, evaluate, sweep-length, ablate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Sequence

from .corpus import CorpusError, NewsReportPair, build_vocabulary, load_corpus, split_pairs
from .metrics import EvalPair, format_table, score_all, write_report
from .model import CvaeKdConfig, KnowledgeBase, NoiseSource, generate
from .numerics import NonFiniteError
from .teacher import load_teacher, save_teacher, train_teacher
from .training import fit, load_model, save_model, write_loss_csv

log = logging.getLogger("cvaekd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
REPORT_LENGTHS = (100, 150, 200)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- config -----------------------------------------------------------------

def _coerce(field: dataclasses.Field, raw: str):
    kind = field.type if isinstance(field.type, str) else field.type.__name__
    if kind == "bool":
        low = raw.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise UsageError(f"config key {field.name}: expected a boolean, got {raw!r}")
        return low in ("1", "true", "yes")
    try:
        return int(raw) if kind == "int" else float(raw)
    except ValueError:
        raise UsageError(f"config key {field.name}: cannot parse {raw!r} as {kind}") from None


def read_config_file(path: str | Path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    fields = {f.name: f for f in dataclasses.fields(CvaeKdConfig)}
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = _coerce(fields[key], value)
    return out


def write_config_file(path: str | Path, config: CvaeKdConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in dataclasses.asdict(config).items():
            fh.write(f"{k} = {v}\n")


def resolve_config(args) -> CvaeKdConfig:
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "alpha", None) is not None:
        values["alpha"] = args.alpha
    if getattr(args, "k", None) is not None:
        values["k_neighbors"] = args.k
    if getattr(args, "no_kd", False):
        values["kd_enabled"] = False
    try:
        return CvaeKdConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# --- shared helpers --------------------------------------------------------------

def _load_pairs(path) -> list[NewsReportPair]:
    if not path:
        raise UsageError("--corpus is required")
    try:
        return load_corpus(path)
    except FileNotFoundError:
        raise DataError(f"corpus not found: {path}") from None
    except CorpusError as exc:
        raise DataError(f"{path}: {exc}") from None


def _splits(pairs, config: CvaeKdConfig):
    train, val, test = split_pairs(pairs, config.seed)
    return train, val, test


def _write_splits(out: Path, train, val, test) -> None:
    d = out / "splits"
    d.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", train), ("val", val), ("test", test)):
        (d / f"{name}.txt").write_text("".join(p.id + "\n" for p in part), encoding="utf-8")


def _teacher_for(args, config, train, vocab, out: Path):
    if not config.kd_enabled:
        return None
    if getattr(args, "teacher", None):
        try:
            teacher = load_teacher(args.teacher)
        except FileNotFoundError:
            raise DataError(f"teacher checkpoint not found: {args.teacher}") from None
        if teacher.vocab_size != len(vocab):
            raise DataError("teacher vocabulary size differs from the corpus vocabulary")
        return teacher
    if getattr(args, "pretrain_teacher", False):
        teacher = train_teacher(train, vocab, config.teacher_config())
        save_teacher(out / "teacher.json", teacher)
        return teacher
    raise UsageError("KD is enabled: pass --teacher PATH or --pretrain-teacher (or --no-kd)")


def _train_run(args, config: CvaeKdConfig, pairs, out: Path, teacher=None, train_split=None):
    """Train and write per-epoch checkpoints, best.json and losses.csv. Returns (result, vocab, splits)."""
    out.mkdir(parents=True, exist_ok=True)
    train, val, test = train_split or _splits(pairs, config)
    _write_splits(out, train, val, test)
    vocab = build_vocabulary(train, config.min_tf, config.tf_strict)
    vocab.dump(out / "vocab.txt")
    write_config_file(out / "config.txt", config)
    if teacher is None:
        teacher = _teacher_for(args, config, train, vocab, out)
    best = {"loss": float("inf")}
    split_ids = {"val_ids": [p.id for p in val], "test_ids": [p.id for p in test]}

    def on_epoch(epoch, result):
        path = out / f"epoch_{epoch:03d}.json"
        save_model(path, result.model, vocab, result.state, teacher if config.kd_enabled else None,
                   [p.id for p in train], epoch=epoch, step=result.steps, **split_ids)
        write_loss_csv(out / "losses.csv", result.history)
        val = result.val_losses[-1]
        if val != val:  # no validation split: fall back to this epoch's mean training loss
            rows = result.history[-max(1, -(-len(train) // config.batch)):]
            val = sum(r["total"] for r in rows) / len(rows)
        if val < best["loss"]:
            best["loss"] = val
            shutil.copyfile(path, out / "best.json")

    result = fit(train, vocab, config, teacher, val, on_epoch=on_epoch)
    return result, vocab, (train, val, test), teacher


def _generate_rows(model, vocab, teacher, kb, items, max_len, sample_seed=None):
    noise = NoiseSource(sample_seed) if sample_seed is not None else None
    rows = []
    for pid, tokens in items:
        gen = generate(tokens, model, teacher, kb, max_len, exclude_id=pid, noise=noise)
        rows.append({"id": pid, "generated": " ".join(gen)})
    return rows


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, ensure_ascii=False) + "\n")


def _read_jsonl(path) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc.msg})") from None


def _score(pred_rows: Sequence[dict], refs: dict[str, Sequence[str]]) -> dict:
    ids = [r["id"] for r in pred_rows]
    if set(ids) != set(refs):
        missing = sorted(set(refs) - set(ids))[:3]
        extra = sorted(set(ids) - set(refs))[:3]
        raise DataError(f"prediction/reference ids differ (missing {missing}, unexpected {extra})")
    return score_all([EvalPair.of(r["generated"], refs[r["id"]]) for r in pred_rows])


def _restore(checkpoint, corpus_pairs):
    try:
        loaded = load_model(checkpoint)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {checkpoint}") from None
    lookup = {p.id: p for p in corpus_pairs}
    missing = [i for i in loaded.train_ids if i not in lookup]
    if missing:
        raise DataError(f"corpus lacks {len(missing)} training ids recorded in the checkpoint")
    train = [lookup[i] for i in loaded.train_ids]
    cfg = loaded.model.config
    if build_vocabulary(train, cfg.min_tf, cfg.tf_strict) != loaded.vocab:
        raise DataError("vocabulary mismatch between checkpoint and corpus")
    kb = KnowledgeBase(train, loaded.vocab, cfg)
    return loaded, kb, lookup


def _check_length(max_len: int, any_length: bool) -> None:
    if not any_length and max_len not in REPORT_LENGTHS:
        raise UsageError(f"--max-len must be one of {REPORT_LENGTHS} (or pass --any-length)")


# --- commands ----------------------------------------------------------------------

def cmd_pretrain_teacher(args) -> int:
    config = resolve_config(args)
    pairs = _load_pairs(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, val, test = _splits(pairs, config)
    _write_splits(out, train, val, test)
    vocab = build_vocabulary(train, config.min_tf, config.tf_strict)
    vocab.dump(out / "vocab.txt")
    teacher = train_teacher(train, vocab, config.teacher_config())
    save_teacher(out / "teacher.json", teacher)
    with open(out / "teacher_ppl.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "ppl_forward", "ppl_backward"])
        for row in teacher.history:
            w.writerow([row["epoch"], repr(row["ppl_forward"]), repr(row["ppl_backward"])])
    print(f"teacher written to {out / 'teacher.json'} (seed {config.seed})")
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_config(args)
    pairs = _load_pairs(args.corpus)
    out = Path(args.out)
    try:
        result, *_ = _train_run(args, config, pairs, out)
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}; last good checkpoint kept in {out}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"trained {result.steps} steps; checkpoints in {out}")
    return EXIT_OK


def _generation_items(args, loaded, lookup):
    if args.input:
        rows = _read_jsonl(args.input)
        items = []
        for i, r in enumerate(rows, start=1):
            if "id" not in r or not isinstance(r.get("news"), str):
                raise DataError(f"{args.input}: line {i} needs 'id' and 'news'")
            items.append((r["id"], r["news"].split()))
        return items
    ids = loaded.blob.get("test_ids") or []
    return [(i, list(lookup[i].news_tokens)) for i in ids]


def cmd_generate(args) -> int:
    _check_length(args.max_len, args.any_length)
    pairs = _load_pairs(args.corpus)
    loaded, kb, lookup = _restore(args.checkpoint, pairs)
    items = _generation_items(args, loaded, lookup)
    seed = None if not args.sample else (args.seed if args.seed is not None else loaded.model.config.seed)
    rows = _generate_rows(loaded.model, loaded.vocab, loaded.teacher, kb, items, args.max_len, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out, rows)
    print(f"wrote {len(rows)} reports to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    preds = _read_jsonl(args.predictions)
    refs = {}
    for i, r in enumerate(_read_jsonl(args.references), start=1):
        if "id" not in r or not isinstance(r.get("report"), str):
            raise DataError(f"{args.references}: line {i} needs 'id' and 'report'")
        refs[r["id"]] = r["report"].split()
    if args.subset_to_predictions:
        refs = {k: v for k, v in refs.items() if k in {p["id"] for p in preds}}
    scores = _score(preds, refs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "scores.json", scores)
    table = format_table([(args.label, scores)])
    (out / "scores.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def _test_scores(model, vocab, teacher, kb, test, max_len):
    items = [(p.id, list(p.news_tokens)) for p in test]
    rows = _generate_rows(model, vocab, teacher, kb, items, max_len)
    refs = {p.id: p.report_tokens for p in test}
    return rows, _score(rows, refs)


def _eval_split(pairs, config):
    _, val, test = _splits(pairs, config)
    part = test or val
    if not part:
        raise DataError("corpus too small: no validation or test pairs to evaluate")
    return part


def cmd_sweep_length(args) -> int:
    lengths = [int(x) for x in args.lengths.split(",")]
    for n in lengths:
        _check_length(n, args.any_length)
    pairs = _load_pairs(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        loaded, kb, lookup = _restore(args.checkpoint, pairs)
        model, vocab, teacher = loaded.model, loaded.vocab, loaded.teacher
        test = [lookup[i] for i in (loaded.blob.get("test_ids") or loaded.blob.get("val_ids") or [])]
        if not test:
            raise DataError("checkpoint records no held-out ids to evaluate")
    else:
        config = resolve_config(args)
        try:
            result, vocab, (_, _, _), teacher = _train_run(args, config, pairs, out / "model")
        except NonFiniteError as exc:
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        model, kb = result.model, result.kb
        test = _eval_split(pairs, config)
    rows = []
    report = {}
    for n in lengths:
        gen, scores = _test_scores(model, vocab, teacher, kb, test, n)
        longest = max((len(r["generated"].split()) for r in gen), default=0)
        _write_jsonl(out / f"generated_{n}.jsonl", gen)
        scores["max_generated_len"] = longest
        report[str(n)] = scores
        rows.append((str(n), scores))
    write_report(out / "sweep_length.json", report)
    table = format_table(rows, label="Report Length")
    (out / "sweep_length.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = resolve_config(args).replace(kd_enabled=True)
    pairs = _load_pairs(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    max_len = args.max_len if args.max_len is not None else config.max_dec
    _check_length(max_len, args.any_length)
    splits = _splits(pairs, config)
    test = _eval_split(pairs, config)
    report, rows = {}, []
    try:
        for name, cfg in (("CVAE-KD (without KD)", config.replace(kd_enabled=False)), ("CVAE-KD", config)):
            sub = out / ("no_kd" if not cfg.kd_enabled else "kd")
            result, vocab, _, teacher = _train_run(args, cfg, pairs, sub, train_split=splits)
            gen, scores = _test_scores(result.model, vocab, teacher, result.kb, test, max_len)
            _write_jsonl(sub / "generated.jsonl", gen)
            report[name] = scores
            rows.append((name, scores))
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    write_report(out / "ablation.json", report)
    table = format_table(rows)
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


# --- parser ----------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, corpus: bool = True) -> None:
    if corpus:
        p.add_argument("--corpus", help="JSONL corpus of {id, news, report}")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--k", type=int, help="number of retrieved neighbours")
    p.add_argument("--no-kd", action="store_true", help="disable the teacher (ablation mode)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cvaekd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("pretrain-teacher", help="train and freeze the bidirectional teacher LM")
    _common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain_teacher)

    p = sub.add_parser("train", help="train the model")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--teacher", help="frozen teacher checkpoint")
    p.add_argument("--pretrain-teacher", action="store_true", help="train a teacher first")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate reports for news items")
    p.add_argument("--corpus", help="corpus the checkpoint was trained on")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", help="JSONL of {id, news}; defaults to the checkpoint's test split")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--max-len", type=int, default=200)
    p.add_argument("--any-length", action="store_true")
    p.add_argument("--deterministic", action="store_true", default=True, help="eps = 0 (default)")
    p.add_argument("--sample", action="store_true", help="sample z1 instead of eps = 0")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score predictions against references")
    p.add_argument("--predictions", required=True)
    p.add_argument("--references", required=True, help="JSONL with {id, report}")
    p.add_argument("--out", required=True)
    p.add_argument("--label", default="CVAE-KD")
    p.add_argument("--subset-to-predictions", action="store_true",
                   help="ignore references whose id has no prediction")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-length", help="score generation at several maximum lengths")
    _common(p)
    p.add_argument("--checkpoint", help="trained checkpoint; trains one when omitted")
    p.add_argument("--teacher")
    p.add_argument("--pretrain-teacher", action="store_true")
    p.add_argument("--lengths", default="100,150,200")
    p.add_argument("--any-length", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_length)

    p = sub.add_parser("ablate", help="train with and without distillation and compare")
    _common(p)
    p.add_argument("--teacher")
    p.add_argument("--pretrain-teacher", action="store_true")
    p.add_argument("--max-len", type=int)
    p.add_argument("--any-length", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CorpusError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
