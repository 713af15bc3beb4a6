"""Command-line interface: ``audioret <command> ...``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio import PreprocessConfig, SnrSpec, ToyEncoder, encode_clip, read_wav
from .baselines import BM25Index, lexical_search, semantic_search
from .data import RetrievalData, chunk_row_id, load_data
from .errors import AudioRetError, DataError, UsageError
from .formats import csv_text, read_embeddings, write_csv, write_embeddings
from .refinement import embed_single
from .retrieval import EmbeddingIndex, metric_report, paired_scores, search, wilcoxon_signed_rank
from .text import TextDoc, ToyTextEncoder
from .train import (ABLATION_HEADER, AXES, EPOCH_LOG_HEADER, STEP_LOG_HEADER, Checkpoint, TrainConfig,
                    ablate, embed_audio, embed_text, evaluate, train)

TABLE_HEADER = ("Model", "Dataset", "Modality", "R@1", "R@5", "R@10", "mAP@10")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def emit_table(header: Sequence[str], rows: Sequence[Sequence], as_csv: bool, out=None) -> None:
    out = out or sys.stdout
    if as_csv:
        out.write(csv_text(header, rows))
        return
    cells = [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in row] for row in rows]
    widths = [max(len(str(h)), *(len(r[i]) for r in cells)) if cells else len(str(h)) for i, h in enumerate(header)]
    out.write("  ".join(str(h).ljust(w) for h, w in zip(header, widths)) + "\n")
    for r in cells:
        out.write("  ".join(c.ljust(w) for c, w in zip(r, widths)) + "\n")


# ------------------------------------------------------------------ commands

def cmd_preprocess(args) -> int:
    wav_dir = Path(args.inp)
    files = sorted(p for p in wav_dir.iterdir() if p.suffix.lower() == ".wav") if wav_dir.is_dir() else []
    if not files:
        raise DataError(f"no .wav files in {wav_dir}")
    config = PreprocessConfig(chunk_len_s=args.chunk_len, min_gap_s=args.silence_gap)
    encoder = ToyEncoder(seed=args.encoder_seed, d_model=args.d_model)
    ids, rows, table = [], [], []
    for key, path in enumerate(files):
        noise = SnrSpec(args.snr, seed=args.seed * 1_000_003 + key) if args.snr is not None else None
        seq = encode_clip(read_wav(path, args.sample_rate), encoder, config, noise, source_id=key)
        for j, vec in enumerate(seq):
            ids.append(chunk_row_id(key, j))
            rows.append(vec)
        table.append((key, path.name, len(seq)))
    write_embeddings(args.out, ids, np.stack(rows))
    emit_table(("key", "file", "chunks"), table, args.csv)
    return 0


def _load_run_data(ref: str, config: TrainConfig, encoder_seed: int) -> RetrievalData:
    return load_data(ref, seed=encoder_seed, d_model=config.d_model)


def cmd_train(args) -> int:
    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    data = _load_run_data(args.data, config, args.encoder_seed)
    resume = Checkpoint.load(args.resume) if args.resume else None
    result = train(config, data, resume=resume)
    out = Path(args.out)
    result.checkpoint.save(out)
    write_csv(out.with_name(out.name + ".steps.csv"), STEP_LOG_HEADER, result.step_log)
    write_csv(out.with_name(out.name + ".epochs.csv"), EPOCH_LOG_HEADER, result.epoch_log)
    ck = result.checkpoint
    emit_table(("best_epoch", "val_mAP@10", "steps", "epochs_run"),
               [(ck.epoch, ck.val_map, ck.adam.step, len(result.epoch_log))], args.csv)
    return 0


def _split(data: RetrievalData, split: str) -> RetrievalData:
    return data if split == "all" else data.split_view(split)


def cmd_index(args) -> int:
    ck = Checkpoint.load(args.ckpt)
    data = _split(_load_run_data(args.data, ck.config, args.encoder_seed), args.split)
    if args.modality == "a":
        ids, vecs = [a.id for a in data.audio], embed_audio(ck.params, [a.seq for a in data.audio])
    else:
        ids, vecs = [t.id for t in data.text], embed_text(ck.params, [t.seq for t in data.text])
    if not ids:
        raise DataError("nothing to index")
    write_embeddings(args.out, ids, vecs)
    emit_table(("modality", "count", "dim"), [(args.modality, len(ids), vecs.shape[1])], args.csv)
    return 0


def cmd_search(args) -> int:
    ids, vecs = read_embeddings(args.index)
    vecs = vecs.astype(np.float64)
    # stored rows are f32; build() renormalises them in f64
    index = EmbeddingIndex.build([int(i) for i in ids], vecs)
    if args.ckpt:
        ck = Checkpoint.load(args.ckpt)
        if args.query.lower().endswith(".wav") and Path(args.query).exists():
            seq = encode_clip(read_wav(args.query, args.sample_rate), ToyEncoder(args.encoder_seed, ck.config.d_model))
            q = embed_single(seq, "audio", ck.params)
        else:
            q = embed_single(ToyTextEncoder(args.encoder_seed, ck.config.d_model).encode(args.query), "text", ck.params)
    else:
        try:
            q = np.array([float(v) for v in args.query.split(",")])
        except ValueError as exc:
            raise UsageError("without --ckpt, --query must be a comma-separated vector") from exc
        if q.size != vecs.shape[1]:
            raise UsageError(f"query has {q.size} components, index has {vecs.shape[1]}")
        q = q / np.linalg.norm(q)
    emit_table(("rank", "id", "score"), [(r + 1, i, s) for r, (i, s) in enumerate(search(index, q, args.k))], args.csv)
    return 0


def cmd_eval(args) -> int:
    ck = Checkpoint.load(args.ckpt)
    full = _load_run_data(args.data, ck.config, args.encoder_seed)
    data = _split(full, args.split)
    noise = SnrSpec(args.snr, seed=args.noise_seed) if args.snr is not None else None
    result = evaluate(ck.params, data, args.direction, noise=noise, dump_attention=bool(args.dump_attention))
    rep = result.report
    dataset = Path(args.data).name if not args.data.startswith("synthetic") else "synthetic"
    model = f"refiner-{ck.config.projection}-{ck.config.pooling}"
    emit_table(TABLE_HEADER, [(model, dataset, args.direction, *rep.row())], args.csv)
    if args.per_query:
        write_csv(args.per_query, ("query_id", "ap@10"), sorted(rep.per_query_ap.items()))
    if args.dump_attention:
        rows = [(aid, j, float(w)) for aid, alpha in result.attention.items() for j, w in enumerate(alpha)]
        write_csv(args.dump_attention, ("clip_id", "chunk_index", "weight"), rows)
    if args.significance:
        baseline = _read_per_query(args.significance)
        ours = {str(k): v for k, v in rep.per_query_ap.items()}
        x, y = paired_scores(ours, baseline)
        w = wilcoxon_signed_rank(x, y)
        emit_table(("test", "n", "W", "p_value", "method"),
                   [("wilcoxon", w.n_effective, w.statistic, w.p_value, w.method)], args.csv)
    return 0


def _read_per_query(path: str) -> dict[str, float]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read baseline report {path}: {exc}") from exc
    try:
        return {row["query_id"]: float(row["ap@10"]) for row in rows}
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: expected columns query_id, ap@10") from exc


def cmd_ablate(args) -> int:
    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    data = _load_run_data(args.data, config, args.encoder_seed)
    grid = None
    if args.grid:
        text = Path(args.grid).read_text() if Path(args.grid).exists() else args.grid
        grid = [v.strip() for v in text.replace("\n", ",").replace(";", ",").split(",") if v.strip()]
    rows = ablate(config, data, args.axis, grid, args.split)
    if args.out:
        write_csv(args.out, ABLATION_HEADER, rows)
    emit_table(ABLATION_HEADER, rows, args.csv)
    return 0


def _read_jsonl(path: str) -> list[dict]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    out = []
    for n, line in enumerate(lines, 1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{n}: {exc}") from exc
    return out


def cmd_baseline(args) -> int:
    captions = [TextDoc(r["id"], r["text"]) for r in _read_jsonl(args.captions)]
    queries = _read_jsonl(args.queries)
    if not captions:
        raise DataError("caption corpus is empty")
    encoder = ToyTextEncoder(args.encoder_seed)
    bm25 = BM25Index(captions, args.k1, args.b) if args.method == "bm25" else None
    rankings, relevance, rows = {}, {}, []
    for q in queries:
        doc = TextDoc(q["id"], q["text"])
        if args.method == "lexical":
            hits = lexical_search(doc, captions, args.k)
        elif args.method == "bm25":
            hits = bm25.search(doc, args.k)
        else:
            hits = semantic_search(q["text"], captions, lambda s: encoder.encode(s).mean(axis=0), args.k)
        rankings[q["id"]] = [h[0] for h in hits]
        if q.get("relevant"):
            relevance[q["id"]] = set(q["relevant"])
        rows.extend((q["id"], r + 1, cid, score) for r, (cid, score) in enumerate(hits))
    emit_table(("query_id", "rank", "caption_id", "score"), rows, args.csv)
    if relevance:
        rep = metric_report({k: v for k, v in rankings.items() if k in relevance}, relevance)
        emit_table(("method", "R@1", "R@5", "R@10", "mAP@10"), [(args.method, *rep.row())], args.csv)
    return 0


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--csv", action="store_true", help="emit tables as CSV")
    common.add_argument("--encoder-seed", type=int, default=0, help="seed of the toy audio/text encoders")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="audioret", description="Audio-text retrieval with cross-modal embedding refinement.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", parents=[common], help="silence removal, chunking, toy encoding -> AEMB")
    p.add_argument("--in", dest="inp", required=True, help="directory of WAV files")
    p.add_argument("--out", required=True)
    p.add_argument("--chunk-len", type=float, default=10.0)
    p.add_argument("--silence-gap", type=float, default=1.0)
    p.add_argument("--snr", type=float, default=None, help="mix white noise at this SNR (dB)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample-rate", type=int, default=None, help="decimate to this rate (integer factor)")
    p.add_argument("--d-model", type=int, default=64)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train the refinement module")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True, help="manifest path or synthetic:key=value,...")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--resume", default=None, help="continue from a checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", parents=[common], help="embed one modality into an AEMB index")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--modality", choices=("a", "t"), required=True)
    p.add_argument("--split", default="all", choices=("all", "train", "val", "test"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", parents=[common], help="top-k search in an AEMB index")
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True, help="text, WAV path, or (without --ckpt) a comma-separated vector")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--sample-rate", type=int, default=None)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", parents=[common], help="retrieval metrics on held-out data")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--direction", choices=("a2t", "t2a"), default="a2t")
    p.add_argument("--split", default="test", choices=("all", "train", "val", "test"))
    p.add_argument("--snr", type=float, default=None)
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--dump-attention", default=None, metavar="CSV", help="write per-clip pooling weights")
    p.add_argument("--per-query", default=None, metavar="CSV", help="write per-query AP@10")
    p.add_argument("--significance", default=None, metavar="CSV", help="per-query AP@10 report of a baseline")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="train+evaluate over one ablation axis")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default="synthetic:")
    p.add_argument("--axis", required=True, choices=sorted(AXES))
    p.add_argument("--grid", default=None, help="file or comma-separated list; loss weights are written a/b/c")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("baseline", parents=[common], help="caption-retrieval baselines")
    p.add_argument("--method", choices=("lexical", "bm25", "semantic"), required=True)
    p.add_argument("--captions", required=True, help='JSONL {"id", "text"}')
    p.add_argument("--queries", required=True, help='JSONL {"id", "text", "relevant"?: [...]}')
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--k1", type=float, default=1.2)
    p.add_argument("--b", type=float, default=0.75)
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except AudioRetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
