"""Command-line entry point: ``laser <subcommand> [options]``.

Every subcommand takes ``--config PATH`` (a JSON object) whose values are
overridden by explicit flags. Results are written as JSON objects carrying the
same ``format``/``version`` envelope as the dataset files, and a one-line
human summary goes to stdout. User errors exit with status 2 and a message.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import BackboneConfig, init_backbone
from .data import (FORMAT, VERSION, GenConfig, gen_multihop, load_corpus, load_dataset,
                   save_corpus, save_dataset)
from .encoder import EncodeMode, encode_corpus, write_embeddings
from .evaluation import bench_latency, evaluate
from .losses import LossWeights
from .trainkit import (TrainConfig, Trainer, load_checkpoint, micro_audit, save_checkpoint)

log = logging.getLogger("laser")


class UserError(Exception):
    pass


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UserError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UserError(f"{p}: invalid JSON ({e.msg} at line {e.lineno})") from None
    if not isinstance(cfg, dict):
        raise UserError(f"{p}: config must be a JSON object")
    return cfg


def _build(cls, values: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UserError(f"unknown {what} field(s): {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise UserError(f"invalid {what}: {e}") from None


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UserError(f"{what} not found: {p}")
    return p


def _envelope(kind: str, body: dict) -> dict:
    return {"format": FORMAT, "version": VERSION, "kind": kind, **body}


def _write_json(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _train_config(section: dict, seed: int | None) -> TrainConfig:
    section = dict(section)
    if isinstance(section.get("weights"), dict):
        section["weights"] = _build(LossWeights, section["weights"], "loss weights")
    if "betas" in section:
        section["betas"] = tuple(section["betas"])
    cfg = _build(TrainConfig, section, "train config")
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    try:
        cfg.validate()
    except ValueError as e:
        raise UserError(f"invalid train config: {e}") from None
    return cfg


def _backbone_config(section: dict, seed: int | None) -> BackboneConfig:
    cfg = _build(BackboneConfig, dict(section), "backbone config")
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    try:
        cfg.validate()
    except ValueError as e:
        raise UserError(f"invalid backbone config: {e}") from None
    return cfg


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    raw = _read_config(args.config)
    raw = raw.get("data", raw)
    if args.seed is not None:
        raw = {**raw, "seed": args.seed}
    cfg = _build(GenConfig, raw, "data config")
    try:
        task = gen_multihop(cfg)
    except ValueError as e:
        raise UserError(str(e)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out / "train.jsonl", task.train)
    save_dataset(out / "eval.jsonl", task.eval)
    save_corpus(out / "corpus.jsonl", task.corpus)
    print(f"wrote {len(task.train.examples)} train / {len(task.eval.examples)} eval examples and "
          f"{len(task.corpus.docs)} documents to {out}")
    return 0


def cmd_train(args) -> int:
    raw = _read_config(args.config)
    tcfg = _train_config(raw.get("train", {}), args.seed)
    if args.k_train is not None:
        tcfg = replace(tcfg, K_train=args.k_train)
    if args.max_steps is not None:
        tcfg = replace(tcfg, max_steps=args.max_steps)
    data = _require(args.data, "dataset directory")
    train = load_dataset(_require(data / "train.jsonl", "training set"))
    if args.resume:
        ckpt = load_checkpoint(_require(args.resume, "checkpoint"))
        trainer = Trainer.resume(ckpt, train.examples, tcfg if raw.get("train") else None)
    else:
        bcfg = _backbone_config(raw.get("backbone", {}), args.seed)
        trainer = Trainer(init_backbone(bcfg), train.examples, tcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "loss_log.jsonl"
    mode = "a" if args.resume and log_path.exists() else "w"
    t0 = time.perf_counter()
    with open(log_path, mode, encoding="utf-8") as f:
        if mode == "w":
            f.write(json.dumps(_envelope("loss-log", {"train_config": trainer.cfg.to_dict()}),
                               sort_keys=True) + "\n")

        def record(step, rep):
            f.write(json.dumps({"step": step, **rep.to_dict()}, sort_keys=True) + "\n")
            if step % args.log_every == 0:
                log.info("step %d/%d total %.4f", step, trainer.total_steps, rep.total)

        trainer.run(until=args.until, callback=record)
    save_checkpoint(out / "model.ckpt", trainer.checkpoint())
    last = trainer.history[-1].total if trainer.history else float("nan")
    print(f"trained to step {trainer.step}/{trainer.total_steps} in {time.perf_counter() - t0:.1f}s, "
          f"final loss {last:.4f}; checkpoint {out / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    raw = _read_config(args.config)
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    data = _require(args.data, "dataset directory")
    examples = load_dataset(_require(data / f"{args.split}.jsonl", f"{args.split} set")).examples
    corpus = load_corpus(_require(data / "corpus.jsonl", "corpus"))
    train_cfg = ckpt.train_config or {}
    mode = args.mode or raw.get("mode", "latent")
    K = args.k_infer if args.k_infer is not None else raw.get("k_infer", train_cfg.get("K_train", 3))
    doc_kind = args.doc_mode or raw.get("doc_mode", train_cfg.get("doc_mode", "latent"))
    if train_cfg.get("disable_latent_view"):
        doc_kind = "plain"
    doc_mode = EncodeMode("plain") if doc_kind == "plain" else EncodeMode("latent", train_cfg.get("K_train", 3))
    res = evaluate(ckpt.backbone(), examples, corpus, mode, K, doc_mode=doc_mode)
    body = res.to_dict(with_rankings=args.rankings)
    body["doc_mode"] = doc_kind
    if args.out:
        _write_json(Path(args.out), _envelope("eval-result", body))
    print(f"{mode} K={K}: nDCG@10 {res.ndcg_at_10:.4f}  R@1 {res.recall_at_1:.4f}  "
          f"R@5 {res.recall_at_5:.4f}  R@10 {res.recall_at_10:.4f}  MRR {res.mrr:.4f}  "
          f"({res.n_queries} queries, {len(res.skipped)} skipped)")
    return 0


def cmd_embed(args) -> int:
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    corpus = load_corpus(_require(args.corpus, "corpus"))
    K = args.k_infer if args.k_infer is not None else (ckpt.train_config or {}).get("K_train", 3)
    mode = EncodeMode("plain") if args.mode == "plain" else EncodeMode("latent", K)
    vecs = encode_corpus(ckpt.backbone(), [d.tokens for d in corpus.docs], mode)
    write_embeddings(args.out, vecs, [d.doc_id for d in corpus.docs])
    print(f"embedded {len(corpus.docs)} documents ({mode.kind}) to {args.out}")
    return 0


def cmd_bench(args) -> int:
    raw = _read_config(args.config)
    if args.checkpoint:
        b = load_checkpoint(_require(args.checkpoint, "checkpoint")).backbone()
    else:
        b = init_backbone(_backbone_config(raw.get("backbone", {}), args.seed))
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    V = b.config.vocab_size
    queries = [rng.integers(4, V, size=args.query_len).tolist() for _ in range(args.n_queries)]
    modes = [("plain", 0), ("latent", args.k_infer), ("explicit", args.rationale_len)]
    try:
        rep = bench_latency(b, queries, modes, warmup=args.warmup)
    except ValueError as e:
        raise UserError(str(e)) from None
    body = {"timings": rep.to_dict(), "query_len": args.query_len, "n_queries": args.n_queries}
    if args.out:
        _write_json(Path(args.out), _envelope("latency-report", body))
    lat = f"latent(K={args.k_infer})"
    exp = f"explicit(R={args.rationale_len})"
    for name, t in rep.timings.items():
        print(f"{name:>16}: mean {t.mean_ms:8.2f} ms  median {t.median_ms:8.2f} ms  p95 {t.p95_ms:8.2f} ms")
    print(f"latent/plain {rep.ratio(lat, 'plain'):.2f}x   latent/explicit {rep.ratio(lat, exp):.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    err = micro_audit(seed=args.seed or 0)
    ok = err < args.tol
    body = {"max_rel_error": err, "tol": args.tol, "passed": ok,
            "seconds": time.perf_counter() - t0}
    if args.out:
        _write_json(Path(args.out), _envelope("gradcheck", body))
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAILED'}, tol {args.tol:g}, "
          f"{body['seconds']:.1f}s)")
    return 0 if ok else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="laser", description="Latent-thinking dense retrieval toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", help="JSON config file; flags override its values")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required)
        return sp

    sp = common(sub.add_parser("gen-data", help="generate the synthetic multi-hop task"), True)
    sp.set_defaults(fn=cmd_gen_data)

    sp = common(sub.add_parser("train", help="dual-view training; writes a checkpoint and loss log"), True)
    sp.add_argument("--data", required=True, help="directory holding train.jsonl")
    sp.add_argument("--k-train", type=int)
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--until", type=int, help="stop after this global step (resumable)")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--log-every", type=int, default=50)
    sp.set_defaults(fn=cmd_train)

    sp = common(sub.add_parser("eval", help="retrieval metrics for a checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="directory holding <split>.jsonl and corpus.jsonl")
    sp.add_argument("--split", default="eval")
    sp.add_argument("--mode", choices=("plain", "latent", "explicit"))
    sp.add_argument("--k-infer", type=int)
    sp.add_argument("--doc-mode", choices=("plain", "latent"))
    sp.add_argument("--rankings", action="store_true", help="include per-query rankings in --out")
    sp.set_defaults(fn=cmd_eval)

    sp = common(sub.add_parser("embed", help="dump corpus embeddings"), True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--mode", choices=("plain", "latent"), default="latent")
    sp.add_argument("--k-infer", type=int)
    sp.set_defaults(fn=cmd_embed)

    sp = common(sub.add_parser("bench", help="per-query latency of plain, latent and rewrite encoding"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--k-infer", type=int, default=3)
    sp.add_argument("--rationale-len", type=int, default=64)
    sp.add_argument("--query-len", type=int, default=48)
    sp.add_argument("--n-queries", type=int, default=20)
    sp.add_argument("--warmup", type=int, default=3)
    sp.set_defaults(fn=cmd_bench)

    sp = common(sub.add_parser("gradcheck", help="finite-difference audit of the full objective"))
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UserError as e:
        print(f"laser {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        # malformed files and similar input problems, not programming errors
        print(f"laser {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
