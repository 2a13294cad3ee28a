"""``emergelab`` command line: gen | train | eval | analyze | report."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as an
from . import autodiff as ad
from . import config as cf
from . import datasets as ds
from . import games
from . import training as tr
from .errors import ConfigError, DimensionError, FormatError, TrainingError

log = logging.getLogger("emergelab")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NOT_EMPTY = 2
EXIT_STALE_DATA = 3
EXIT_NAN = 4
EXIT_INCOMPATIBLE_CKPT = 5
EXIT_DUMP_TOO_SMALL = 6
EXIT_MIXED_CONFIGS = 7

DATASET_MANIFEST = "dataset.json"
TOPSIM_HEADER = ("space_a", "space_b", "method", "n", "rho")
RECALL_HEADER = ("input", "k", "recall_hits_over_k", "recall_hits_over_min", "excluded_chars")
UNIGRAM_HEADER = ("symbol", "count", "frequency")
BIGRAM_HEADER = ("w1", "w2", "count", "pmi")
SUMMARY_HEADER = ("messages", "length", "total_symbols", "top_symbol", "dominance", "repeats",
                  "repeat_rate", "repeats_per_message")
EVAL_HEADER = ("condition", "count", "accuracy")
AGGREGATE_HEADER = ("condition", "game", "char_count", "k", "split", "runs", "mean", "std")
COMPARISON_HEADER = ("k", "split", "baseline_mean", "baseline_std", "multi_mean", "multi_std")
STD_NOTE = "# std is the population standard deviation (ddof=0) across seeds\n"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _write_csv(path, header, rows, preamble: str = "") -> None:
    Path(path).write_text(preamble + _csv_text(header, rows), encoding="utf-8", newline="")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _prepare_out(out: Path, force: bool) -> bool:
    if out.exists() and any(out.iterdir()) and not force:
        print(f"error: output directory {out} is not empty (use --force)", file=sys.stderr)
        return False
    out.mkdir(parents=True, exist_ok=True)
    return True


# --------------------------------------------------------------------- gen

def _shard_plan(cfg):
    d = cfg["data"]
    plan = []
    if "referential" in d["games"]:
        for n in d["ref_char_counts"]:
            plan.append((f"ref_c{n}_train", "referential", n, None, "train", d["ref_train_count"]))
            plan.append((f"ref_c{n}_eval", "referential", n, None, "eval", d["ref_eval_count"]))
    if "vqa" in d["games"]:
        for k in d["vqa_ks"]:
            plan.append((f"vqa_k{k}_train", "vqa", d["vqa_char_count"], k, "train", d["vqa_train_count"]))
            plan.append((f"vqa_k{k}_valid", "vqa", d["vqa_char_count"], k, "valid", d["vqa_eval_count"]))
            if k < ds.NUM_CHARS - 1:
                plan.append((f"vqa_k{k}_test", "vqa", d["vqa_char_count"], k, "test", d["vqa_eval_count"]))
    return plan


def _generate(kind, n_chars, k, part, count, seed, distractors):
    if kind == "referential":
        stream = 0 if part == "train" else 1
        return ds.generate_referential_set(n_chars, distractors, count, seed, stream=stream)
    split = ds.make_split(k, seed)
    partition = "test" if part == "test" else "train"
    tag = {"train": 1, "valid": 4, "test": 2}[part]
    return ds.generate_vqa_set(split, partition, n_chars, count, seed, stream=(tag, k))


def dataset_digest(data_dir: Path, names) -> str:
    h = hashlib.sha256()
    for name in sorted(names):
        h.update(name.encode())
        h.update(_sha256(data_dir / f"{name}.emds").encode())
    return h.hexdigest()


def cmd_gen(args) -> int:
    cfg = cf.load_config(args.config)
    if args.seed is not None:
        cfg["data"]["seed"] = args.seed
    if args.count is not None:
        for key in ("ref_train_count", "ref_eval_count", "vqa_train_count", "vqa_eval_count"):
            cfg["data"][key] = args.count
    if args.game is not None:
        cfg["data"]["games"] = tuple(args.game.split(","))
    out = Path(args.out)
    if not _prepare_out(out, args.force):
        return EXIT_NOT_EMPTY
    d = cfg["data"]
    shards = {}
    for name, kind, n_chars, k, part, count in _shard_plan(cfg):
        samples = _generate(kind, n_chars, k, part, count, d["seed"], d["distractors"])
        path = out / f"{name}.emds"
        ds.write_shard(samples, path)
        shards[name] = {"kind": kind, "char_count": n_chars, "k": k, "partition": part, "count": count,
                        "sha256": _sha256(path)}
        log.info("wrote %s (%d samples)", path, count)
    manifest = {"format": "EMDS", "version": 1, "seed": d["seed"], "shards": shards,
                "digest": dataset_digest(out, shards)}
    (out / DATASET_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    cf.write_config(cfg, out / "config.ini")
    return EXIT_OK


# ------------------------------------------------------------------ loading

def _load_manifest(data_dir: Path) -> dict:
    path = data_dir / DATASET_MANIFEST
    if not path.exists():
        raise FormatError(f"{path} not found; run `emergelab gen` first")
    return json.loads(path.read_text(encoding="utf-8"))


def _verify_digest(data_dir: Path, manifest) -> bool:
    try:
        return dataset_digest(data_dir, manifest["shards"]) == manifest["digest"]
    except OSError:
        return False


def _load_condition(path: Path, kind: str) -> dict:
    images = ds.read_shard_images(path)
    if kind == "referential":
        samples = ds.read_shard(path)
        return {"images": images, "samples": samples}
    samples = ds.read_shard(path)
    qids = games.ag.questions_to_ids([s.question for s in samples]) if samples else np.zeros((0, 5), np.int64)
    return {"images": images[:, 0], "questions": qids, "labels": np.array([s.label for s in samples], dtype=bool),
            "samples": samples}


def _arrays(cond):
    return {k: v for k, v in cond.items() if k != "samples"}


def _data_for(game: games.GameConfig, data_dir: Path):
    """``(train, eval_conditions)`` for one game condition."""
    if game.kind == "referential":
        base = f"ref_c{game.char_count}"
        train = _load_condition(data_dir / f"{base}_train.emds", "referential")
        ev = {str(game.char_count): _load_condition(data_dir / f"{base}_eval.emds", "referential")}
        if train["images"].shape[1] != game.distractors + 2:
            raise ConfigError(f"data has {train['images'].shape[1] - 2} distractors, config wants {game.distractors}")
        return train, ev
    base = f"vqa_k{game.split_k}"
    train = _load_condition(data_dir / f"{base}_train.emds", "vqa")
    ev = {"train": _load_condition(data_dir / f"{base}_valid.emds", "vqa")}
    if (data_dir / f"{base}_test.emds").exists():
        ev["test"] = _load_condition(data_dir / f"{base}_test.emds", "vqa")
    return train, ev


def _condition_name(game: games.GameConfig) -> str:
    if game.kind == "referential":
        return f"referential_c{game.char_count}"
    return f"{game.kind}_k{game.split_k}"


# -------------------------------------------------------------------- train

def _apply_game_overrides(cfg, args):
    g = cfg["game"]
    if getattr(args, "game", None):
        g["kind"] = args.game
    if getattr(args, "chars", None) is not None:
        g["char_count"] = args.chars
    if getattr(args, "k", None) is not None:
        g["split_k"] = args.k
    t = cfg["train"]
    if getattr(args, "epochs", None) is not None:
        t["epochs"] = args.epochs
    seeds = getattr(args, "seeds", None)
    if seeds is not None:
        base = args.seed if args.seed is not None else 0
        t["seeds"] = tuple(base + i for i in range(seeds))
    elif getattr(args, "seed", None) is not None:
        t["seeds"] = (args.seed,)


def cmd_train(args) -> int:
    cfg = cf.load_config(args.config)
    _apply_game_overrides(cfg, args)
    data_dir = Path(args.data)
    manifest = _load_manifest(data_dir)
    if not _verify_digest(data_dir, manifest):
        print(f"error: dataset in {data_dir} does not match its manifest digest (stale data)", file=sys.stderr)
        return EXIT_STALE_DATA
    game = cf.game_config(cfg)
    train, ev = _data_for(game, data_dir)
    out = Path(args.out)
    if not args.resume and not _prepare_out(out, args.force):
        return EXIT_NOT_EMPTY
    out.mkdir(parents=True, exist_ok=True)
    cf.write_config(cfg, out / "config.ini")
    for seed in cfg["train"]["seeds"]:
        run_dir = out / f"seed_{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        cf.write_config(cfg, run_dir / "config.ini")
        resume = None
        if args.resume and (run_dir / "checkpoint.emlb").exists():
            resume = ad.load_checkpoint(run_dir / "checkpoint.emlb")
        started = time.time()
        try:
            result = tr.train_run(game, cf.train_config(cfg, seed), _arrays(train),
                                  {k: _arrays(v) for k, v in ev.items()}, out_dir=run_dir, resume=resume,
                                  max_steps=args.max_steps)
        except TrainingError as exc:
            print(f"error: seed {seed}: {exc}", file=sys.stderr)
            return EXIT_NAN
        run_manifest = {
            "artifact_version": __version__, "condition": _condition_name(game), "game": game.kind,
            "char_count": game.char_count, "k": game.split_k if game.kind != "referential" else None,
            "seed": seed, "dataset_digest": manifest["digest"], "data_dir": str(data_dir.resolve()),
            "steps": result.step, "final_accuracy": result.final,
            "config": json.loads(json.dumps(cfg, default=list)),
            "wall_clock": {"started": started, "seconds": time.time() - started,
                           "python": platform.python_version(), "platform": platform.platform()},
        }
        (run_dir / "run.json").write_text(json.dumps(run_manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        print(f"seed {seed}: step {result.step} accuracy {result.final}")
    return EXIT_OK


# --------------------------------------------------------------------- eval

def _run_dir_of(path: Path) -> Path:
    return path.parent if path.is_file() else path


def evaluate_run(run_dir: Path, data_dir: Path, trace_count: int | None = None):
    cfg = cf.load_config(run_dir / "config.ini")
    game = cf.game_config(cfg)
    arrays = ad.load_checkpoint(run_dir / "checkpoint.emlb")
    sender, receiver = tr.load_agents(arrays, game)
    _, ev = _data_for(game, data_dir)
    seed = json.loads((run_dir / "run.json").read_text())["seed"] if (run_dir / "run.json").exists() else 0
    result = games.evaluate({k: _arrays(v) for k, v in ev.items()}, sender, receiver, game, seed=seed,
                            trace=trace_count is not None)
    return cfg, game, ev, result


def _trace_records(game, ev, result, limit=None):
    records = []
    index = 0
    samples = [s for cond in ev.values() for s in cond["samples"]]
    for b in result.batches:
        if b.trace is None or b.trace.receiver_hidden is None:
            continue
        for i in range(len(b)):
            s = samples[index]
            chars = s.original.char_set if game.kind == "referential" else s.scene.char_set
            records.append(an.trace_record(index, b.message.symbols[i], chars, b.trace.visual_features[i],
                                           b.trace.sender_hidden[i], b.trace.receiver_hidden[i]))
            index += 1
    return records[:limit] if limit else records


def cmd_eval(args) -> int:
    run_dir = _run_dir_of(Path(args.checkpoint))
    data_dir = Path(args.data)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    try:
        cfg, game, ev, result = evaluate_run(run_dir, data_dir, trace_count=0 if args.trace else None)
    except DimensionError as exc:
        print(f"error: checkpoint incompatible with configuration: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE_CKPT
    rows = [(name, len(ev[name]["images"]), f"{acc:.6f}") for name, acc in result.breakdown.items()]
    rows.append(("all", result.count, f"{result.accuracy:.6f}"))
    _write_csv(out / "eval.csv", EVAL_HEADER, rows)
    if args.trace:
        if game.kind == "vqa_baseline":
            print("warning: the single-agent baseline has no channel; no trace written", file=sys.stderr)
        else:
            an.write_trace(out / "trace.jsonl", _trace_records(game, ev, result), game.channel.vocab_size)
    for name, acc in result.breakdown.items():
        print(f"{name}: {acc:.4f}")
    return EXIT_OK


# ------------------------------------------------------------------ analyze

def cmd_analyze(args) -> int:
    cfg = cf.load_config(args.config)
    a = cfg["analysis"]
    vocab, records = an.read_trace(args.trace)
    if len(records) < 3:
        print(f"error: trace dump has {len(records)} samples; at least 3 are needed", file=sys.stderr)
        return EXIT_DUMP_TOO_SMALL
    spaces, corpus = an.collect_spaces(records, vocab)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    method = a["correlation"]

    ts_rows = []
    for x, y in (("visual", "sender"), ("visual", "receiver"), ("sender", "receiver")):
        rho = an.topographic_similarity(spaces[x], spaces[y], method)
        ts_rows.append((x, y, method, len(corpus), f"{rho:.9f}"))
    _write_csv(out / "topsim.csv", TOPSIM_HEADER, ts_rows)

    labels = an.presence_labels(corpus.char_sets)
    inputs = {"messages": an.one_hot_messages(corpus.messages, corpus.vocab_size),
              **{tap: spaces[tap].vectors for tap in an.TAPS}}
    rec_rows = []
    for name, x in inputs.items():
        res = an.train_probe(x, labels, seed=args.seed or 0, epochs=a["probe_epochs"], lr=a["probe_lr"],
                             hidden=a["probe_hidden"] or None)
        excl = " ".join(str(c) for c in res.excluded)
        for k, (r_k, r_min) in res.recall.items():
            rec_rows.append((name, k, f"{r_k:.6f}", f"{r_min:.6f}", excl))
    _write_csv(out / "probe_recall.csv", RECALL_HEADER, rec_rows)

    st = an.message_stats(corpus)
    _write_csv(out / "message_unigrams.csv", UNIGRAM_HEADER,
               [(s, c, f"{c / st.total:.6f}") for s, c in sorted(st.unigrams.items())])
    _write_csv(out / "message_bigrams.csv", BIGRAM_HEADER,
               [(a_, b_, c, f"{st.pmi[(a_, b_)]:.6f}") for (a_, b_), c in sorted(st.bigrams.items())])
    _write_csv(out / "message_summary.csv", SUMMARY_HEADER,
               [(len(corpus), corpus.messages.shape[1], st.total, st.top_symbol, f"{st.dominance:.6f}",
                 st.repeats, f"{st.repeat_rate:.6f}", f"{st.repeats_per_message:.6f}")])

    if a["svg"] and not args.no_svg:
        (out / "topsim.svg").write_text(an.svg_bar_chart(
            "Topographic similarity", [f"{x}-{y}" for x, y, *_ in ts_rows], [float(r[-1]) for r in ts_rows],
            y_max=1.0), encoding="utf-8")
        msg_rows = [r for r in rec_rows if r[0] == "messages"]
        (out / "recall_at_k.svg").write_text(an.svg_bar_chart(
            "Message probe recall@k", [f"k={r[1]}" for r in msg_rows], [float(r[2]) for r in msg_rows]),
            encoding="utf-8")
    return EXIT_OK


# ------------------------------------------------------------------- report

_GROUP_FIELDS = {("game", "kind"), ("game", "char_count"), ("game", "split_k")}


def _comparable(cfg) -> dict:
    return {f"{s}.{k}": v for s, sec in cfg.items() if s in ("game", "train") for k, v in sec.items()
            if (s, k) not in _GROUP_FIELDS and (s, k) != ("train", "seeds")}


def _final_rows(run_dir: Path):
    with open(run_dir / "metrics.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    last = max(int(r["step"]) for r in rows)
    return {r["split"]: float(r["accuracy"]) for r in rows if int(r["step"]) == last}


def _expand_runs(paths):
    runs = []
    for p in map(Path, paths):
        if (p / "run.json").exists():
            runs.append(p)
        else:
            runs.extend(sorted(q for q in p.glob("seed_*") if (q / "run.json").exists()))
    return runs


def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=0))


def cmd_report(args) -> int:
    runs = _expand_runs(args.runs)
    if not runs:
        print("error: no run directories found", file=sys.stderr)
        return EXIT_USAGE
    groups: dict[tuple, list[float]] = {}
    reference = None
    for run in runs:
        meta = json.loads((run / "run.json").read_text(encoding="utf-8"))
        cfg = cf.load_config(run / "config.ini")
        comp = _comparable(cfg)
        if reference is None:
            reference = (run, comp)
        elif comp != reference[1]:
            diff = sorted(k for k in comp if comp[k] != reference[1].get(k))
            print(f"error: {run} is incompatible with {reference[0]} (differs in {', '.join(diff)})", file=sys.stderr)
            return EXIT_MIXED_CONFIGS
        for split, acc in _final_rows(run).items():
            key = (meta["condition"], meta["game"], meta["char_count"] if meta["game"] == "referential" else "",
                   meta["k"] if meta["k"] is not None else "", split)
            groups.setdefault(key, []).append(acc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, stats = [], {}
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        m, s = mean_std(groups[key])
        stats[key] = (m, s)
        rows.append((*key, len(groups[key]), f"{m:.6f}", f"{s:.6f}"))
    _write_csv(out / "aggregate.csv", AGGREGATE_HEADER, rows, preamble=STD_NOTE)

    comp_rows = []
    ks = sorted({key[3] for key in stats if key[1] in ("vqa", "vqa_baseline")}, key=lambda v: int(v))
    for k in ks:
        for split in ("train", "test"):
            base = next((v for key, v in stats.items() if key[1] == "vqa_baseline" and key[3] == k and key[4] == split), None)
            multi = next((v for key, v in stats.items() if key[1] == "vqa" and key[3] == k and key[4] == split), None)
            if base is None and multi is None:
                continue
            fmt = lambda v, i: "" if v is None else f"{v[i]:.6f}"  # noqa: E731
            comp_rows.append((k, split, fmt(base, 0), fmt(base, 1), fmt(multi, 0), fmt(multi, 1)))
    if comp_rows:
        _write_csv(out / "vqa_comparison.csv", COMPARISON_HEADER, comp_rows, preamble=STD_NOTE)
    return EXIT_OK


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="emergelab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate dataset shards")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.add_argument("--count", type=int, help="samples per shard (overrides all *_count keys)")
    g.add_argument("--game", help="comma list of games to generate: referential,vqa")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train agents, one run per seed")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, help="first seed")
    t.add_argument("--seeds", type=int, help="number of seeds")
    t.add_argument("--game", choices=games.GAME_KINDS)
    t.add_argument("--chars", type=int)
    t.add_argument("--k", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--force", action="store_true")
    t.add_argument("--resume", action="store_true", help="continue from checkpoints in --out")
    t.add_argument("--max-steps", type=int, help=argparse.SUPPRESS)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy evaluation of a trained run")
    e.add_argument("--checkpoint", required=True, help="run directory or its checkpoint.emlb")
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.add_argument("--trace", action="store_true", help="also write trace.jsonl for analysis")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="compositionality analysis of a trace dump")
    a.add_argument("--trace", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config")
    a.add_argument("--seed", type=int)
    a.add_argument("--no-svg", action="store_true")
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("report", help="aggregate runs across seeds")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
