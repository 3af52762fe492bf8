"""Command line entry point: ``chorus <subcommand>`` or ``python -m chorus``.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
``CHORUS_NUM_THREADS`` sets the torch intra-op thread count.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import ConfigError, dataset_spec_from, read_kv, train_config_from
from .data import DATASET_FORMAT_VERSION, DatasetSpec, build_dataset, read_dataset, write_dataset
from .harness import attention_heatmap, evaluate, heatmap_svg
from .inference import (GenerationConfig, encode_batch, generate_compressed, generate_native,
                        write_embeddings, write_embeddings_csv)
from .layout import Sample, Task
from .model import load_checkpoint
from .objectives import PoolingMethod
from .training import train

DATASET_FILE = "dataset.jsonl"
THREADS_ENV = "CHORUS_NUM_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _dataset_path(path: str) -> Path:
    p = Path(path)
    return p / DATASET_FILE if p.is_dir() else p


def _load(ckpt: str, data: str):
    params = load_checkpoint(ckpt, torch.float32)
    return params, read_dataset(_dataset_path(data))


def _eval_item(dataset, index: int):
    if not 0 <= index < len(dataset.eval):
        raise UsageError(f"sample index {index} outside [0, {len(dataset.eval)})")
    return dataset.eval[index]


def cmd_gen_data(args) -> None:
    spec = dataset_spec_from(read_kv(args.spec)) if args.spec else DatasetSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = build_dataset(spec)
    write_dataset(ds, out / DATASET_FILE)
    print(json.dumps({"path": str(out / DATASET_FILE), "version": DATASET_FORMAT_VERSION,
                      "train": len(ds.train), "hetero": len(ds.hetero), "eval": len(ds.eval)}))


def cmd_train(args) -> None:
    config, seed = train_config_from(read_kv(args.config)) if args.config else train_config_from({})
    if args.seed is not None:
        seed = args.seed
    dataset = read_dataset(_dataset_path(args.data))
    _, history = train(config, dataset, seed, out_dir=args.out)
    last = history[-1].record() if history else {}
    print(json.dumps({"checkpoint": str(Path(args.out) / "final.ckpt"), "steps": config.steps, **last}))


def cmd_eval(args) -> None:
    params, dataset = _load(args.ckpt, args.data)
    report = evaluate(params, dataset, pooling=PoolingMethod(args.pooling), n_queries=args.n_queries,
                      n_qa=args.n_qa, gen_cfg=GenerationConfig(max_new_tokens=args.max_new_tokens))
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_embed(args) -> None:
    params, dataset = _load(args.ckpt, args.data)
    if args.which == "queries":
        samples = [e.query for e in dataset.eval]
    else:
        samples = [Sample(e.caption, task=Task.RETRIEVAL_TARGET) for e in dataset.eval]
    emb = encode_batch(params, samples, PoolingMethod(args.pooling))
    if args.format == "csv":
        write_embeddings_csv(args.out, emb)
    else:
        write_embeddings(args.out, emb)
    print(json.dumps({"path": args.out, "count": int(emb.shape[0]), "dim": int(emb.shape[1])}))


def cmd_generate(args) -> None:
    params, dataset = _load(args.ckpt, args.data)
    item = _eval_item(dataset, args.sample)
    sample = item.qa_sample()
    if args.question:
        # the stored answer is never read when decoding
        sample = dataclasses.replace(sample, g_inst=args.question)
    cfg = GenerationConfig(max_new_tokens=args.max_new_tokens, temperature=args.temperature, seed=args.seed)
    fn = generate_native if args.mode == "native" else generate_compressed
    result = fn(params, sample, cfg)
    print(json.dumps({"mode": args.mode, "question": sample.g_inst, "answer": result.text(),
                      "gold": None if args.question else item.qa[1], "cache": result.stats.record()}))


def cmd_visualize(args) -> None:
    params, dataset = _load(args.ckpt, args.data)
    item = _eval_item(dataset, args.sample)
    layer = None if args.layer is None else args.layer - 1
    if layer is not None and not 0 <= layer < params.config.num_layers:
        raise UsageError(f"--layer must lie in [1, {params.config.num_layers}]")
    hm = attention_heatmap(params, item.qa_sample(), layer)
    out = Path(args.out)
    np.savetxt(out, hm, delimiter=",", fmt="%.6g")
    svg = out.with_suffix(".svg")
    svg.write_text(heatmap_svg(hm), encoding="utf-8")
    print(json.dumps({"csv": str(out), "svg": str(svg), "shape": list(hm.shape)}))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="chorus", description="Chorus-token embedding and compressed generation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--spec", help="key-value dataset spec file")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="key-value training config file")
    t.add_argument("--data", required=True, help="dataset directory or file")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--seed", type=int)
    t.set_defaults(fn=cmd_train)

    def model_args(sp):
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--data", required=True)

    e = sub.add_parser("eval", help="Precision@1 and QA accuracy of a checkpoint")
    model_args(e)
    e.add_argument("--out", help="write the report JSON here")
    e.add_argument("--pooling", default="mean", choices=[m.value for m in PoolingMethod])
    e.add_argument("--n-queries", type=int)
    e.add_argument("--n-qa", type=int)
    e.add_argument("--max-new-tokens", type=int, default=4)
    e.set_defaults(fn=cmd_eval)

    m = sub.add_parser("embed", help="export eval-split embeddings")
    model_args(m)
    m.add_argument("--out", required=True)
    m.add_argument("--which", default="queries", choices=["queries", "captions"])
    m.add_argument("--format", default="bin", choices=["bin", "csv"])
    m.add_argument("--pooling", default="mean", choices=[x.value for x in PoolingMethod])
    m.set_defaults(fn=cmd_embed)

    r = sub.add_parser("generate", help="answer an eval item's question")
    r.add_argument("mode", choices=["native", "compressed"])
    model_args(r)
    r.add_argument("--sample", type=int, default=0, help="eval item index")
    r.add_argument("--question", help="override the stored question")
    r.add_argument("--max-new-tokens", type=int, default=8)
    r.add_argument("--temperature", type=float, default=0.0)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(fn=cmd_generate)

    h = sub.add_parser("visualize", help="chorus-to-vision attention heatmap as CSV + SVG")
    model_args(h)
    h.add_argument("--sample", type=int, default=0, help="eval item index")
    h.add_argument("--layer", type=int, help="1-based layer, default the middle one")
    h.add_argument("--out", required=True, help="CSV path; the SVG goes next to it")
    h.set_defaults(fn=cmd_visualize)
    return p


def _set_threads() -> None:
    value = os.environ.get(THREADS_ENV)
    if value is None:
        return
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {value!r}") from None
    torch.set_num_threads(n)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _set_threads()
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0
