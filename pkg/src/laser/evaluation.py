"""Retrieval metrics, corpus evaluation and encoding-latency benchmarks."""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .backbone import EOS, INSTR, Backbone, embed_tokens, forward, lm_logits
from .data import Corpus, TrainingExample
from .encoder import (EncodeMode, encode_corpus, encode_explicit_batch, encode_latent,
                      encode_latent_batch, encode_plain, encode_plain_batch, fingerprint)


def _check_ranking(ranking: Sequence, k: int) -> None:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(set(ranking)) != len(ranking):
        raise ValueError("ranking contains duplicate document ids")


def ndcg_at_k(ranking: Sequence, relevant, k: int) -> float:
    """nDCG@k with gain / log2(rank + 1). ``relevant`` is a set of ids (gain 1)
    or a mapping id -> gain."""
    _check_ranking(ranking, k)
    gains = relevant if isinstance(relevant, dict) else {d: 1.0 for d in relevant}
    ideal = sorted((g for g in gains.values() if g > 0), reverse=True)[:k]
    if not ideal:
        return 0.0
    dcg = sum(gains.get(d, 0.0) / math.log2(r + 2) for r, d in enumerate(ranking[:k]))
    idcg = sum(g / math.log2(r + 2) for r, g in enumerate(ideal))
    return dcg / idcg


def recall_at_k(ranking: Sequence, relevant, k: int) -> float:
    _check_ranking(ranking, k)
    rel = set(relevant)
    if not rel:
        return 0.0
    return len(rel.intersection(ranking[:k])) / len(rel)


def mrr(ranking: Sequence, relevant, k: int | None = None) -> float:
    """Reciprocal rank of the first relevant document (0 if none within k)."""
    k = len(ranking) if k is None else k
    _check_ranking(ranking, max(k, 1))
    rel = set(relevant)
    for r, d in enumerate(ranking[:k]):
        if d in rel:
            return 1.0 / (r + 1)
    return 0.0


@dataclass
class EvalResult:
    ndcg_at_10: float
    recall_at_1: float
    recall_at_5: float
    recall_at_10: float
    mrr: float
    mode: str
    K_infer: int
    n_queries: int
    skipped: list[int] = field(default_factory=list)
    corpus_fingerprint: str = ""
    rankings: list[list[str]] = field(default_factory=list)

    def to_dict(self, with_rankings: bool = False) -> dict:
        d = asdict(self)
        if not with_rankings:
            d.pop("rankings")
        return d


def rank_documents(query_vecs: np.ndarray, doc_vecs: np.ndarray, doc_ids: Sequence[str],
                   depth: int = 10) -> list[list[str]]:
    """Top-``depth`` ids per query by cosine; ties go to the smaller doc id."""
    scores = query_vecs.astype(np.float64) @ doc_vecs.astype(np.float64).T
    ids = np.array(doc_ids)
    id_rank = np.argsort(np.argsort(ids, kind="stable"), kind="stable")
    out = []
    for row in scores:
        order = np.lexsort((id_rank, -row))[:depth]
        out.append(ids[order].tolist())
    return out


def encode_queries(b: Backbone, examples: Sequence[TrainingExample], mode: str, K: int,
                   chunk: int = 64, temperature: float = 1.0, max_len: int | None = None
                   ) -> tuple[np.ndarray, list[int]]:
    """Query vectors for ``mode``; queries that overflow are skipped and their
    positions returned."""
    limit = b.config.max_seq_len if max_len is None else min(max_len, b.config.max_seq_len)
    keep, skipped = [], []
    for i, ex in enumerate(examples):
        n = 1 + len(ex.query)
        n += K if mode == "latent" else 1
        if mode == "explicit":
            n += len(ex.rationale)
        (skipped if n > limit else keep).append(i)
    outs = []
    with ad.no_grad():
        for s in range(0, len(keep), chunk):
            part = [examples[i] for i in keep[s:s + chunk]]
            qs = [ex.query for ex in part]
            if mode == "plain":
                v = encode_plain_batch(b, qs)
            elif mode == "latent":
                v = encode_latent_batch(b, qs, K, temperature).v
            elif mode == "explicit":
                v = encode_explicit_batch(b, qs, [ex.segments for ex in part]).v_star
            else:
                raise ValueError(f"unknown mode {mode!r}")
            outs.append(v.data.copy())
    m = b.config.model_dim
    return (np.concatenate(outs) if outs else np.zeros((0, m), dtype=b.dtype)), skipped


def evaluate(b: Backbone, examples: Sequence[TrainingExample], corpus: Corpus, mode: str = "latent",
             K_infer: int = 3, doc_mode: EncodeMode | None = None,
             doc_vectors: np.ndarray | None = None, temperature: float = 1.0) -> EvalResult:
    """Encode the corpus once, rank it for every query, average the metrics.

    ``doc_mode`` defaults to latent encoding with ``K_infer`` steps; pass
    precomputed ``doc_vectors`` to reuse a corpus encoding across runs.
    """
    if doc_vectors is None:
        doc_mode = EncodeMode("latent", K_infer) if doc_mode is None else doc_mode
        doc_vectors = encode_corpus(b, [d.tokens for d in corpus.docs], doc_mode,
                                    temperature=temperature)
    doc_ids = [d.doc_id for d in corpus.docs]
    qv, skipped = encode_queries(b, examples, mode, K_infer, temperature=temperature)
    kept = [ex for i, ex in enumerate(examples) if i not in set(skipped)]
    rankings = rank_documents(qv, doc_vectors, doc_ids, depth=10)
    nd, r1, r5, r10, rr = [], [], [], [], []
    for ex, ranking in zip(kept, rankings):
        rel = {ex.meta["positive_id"]}
        nd.append(ndcg_at_k(ranking, rel, 10))
        r1.append(recall_at_k(ranking, rel, 1))
        r5.append(recall_at_k(ranking, rel, 5))
        r10.append(recall_at_k(ranking, rel, 10))
        rr.append(mrr(ranking, rel, 10))
    avg = lambda xs: float(np.mean(xs)) if xs else 0.0
    return EvalResult(avg(nd), avg(r1), avg(r5), avg(r10), avg(rr), mode, K_infer, len(kept),
                      skipped, fingerprint(doc_vectors), rankings)


# ---------------------------------------------------------------------------
# latency
# ---------------------------------------------------------------------------


@dataclass
class ModeTiming:
    mode: str
    mean_ms: float
    median_ms: float
    p95_ms: float
    samples: int
    tokens: float
    steps: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LatencyReport:
    timings: dict[str, ModeTiming]

    def ratio(self, a: str, b: str) -> float:
        return self.timings[a].mean_ms / self.timings[b].mean_ms

    def to_dict(self) -> dict:
        d = {k: v.to_dict() for k, v in self.timings.items()}
        names = list(self.timings)
        lat = [n for n in names if n.startswith("latent")]
        if "plain" in self.timings:
            for n in lat:
                d[f"{n}/plain"] = self.ratio(n, "plain")
        for n in lat:
            for e in (x for x in names if x.startswith("explicit")):
                d[f"{n}/{e}"] = self.ratio(n, e)
        return d


def rewrite_then_encode(b: Backbone, query: Sequence[int], R: int) -> np.ndarray:
    """Greedy-decode R discrete tokens with the backbone's own LM head, then
    encode [INSTR; q; decoded; EOS] with a plain pass."""
    prefix = [INSTR] + list(query)
    if len(prefix) + R + 1 > b.config.max_seq_len:
        raise ValueError(f"rewrite: query length {len(query)} + R={R} exceeds max_seq_len "
                         f"{b.config.max_seq_len}")
    with ad.no_grad():
        hidden, cache = forward(b, embed_tokens(b, prefix))
        h = ad.take_rows(hidden, [hidden.shape[0] - 1])
        decoded = []
        for _ in range(R):
            tok = int(np.argmax(lm_logits(b, h).data[0]))
            decoded.append(tok)
            h, cache = forward(b, embed_tokens(b, [tok]), cache)
        return encode_plain_batch(b, [list(query) + decoded]).data


def _timed(fn, queries, warmup: int) -> list[float]:
    for q in queries[:warmup]:
        fn(q)
    out = []
    for q in queries:
        t0 = time.perf_counter()
        fn(q)
        out.append((time.perf_counter() - t0) * 1e3)
    return out


def bench_latency(b: Backbone, queries: Sequence[Sequence[int]], modes: Iterable[tuple[str, int]],
                  warmup: int = 3, repeats: int = 1) -> LatencyReport:
    """Per-query wall time of each encoding mode.

    ``modes`` holds (kind, n) pairs: ("plain", 0), ("latent", K) and
    ("explicit", R) where R is the number of decoded rationale tokens.
    """
    queries = [list(q) for q in queries]
    if not queries:
        raise ValueError("bench_latency: no queries")
    timings = {}
    for kind, n in modes:
        if kind == "plain":
            name, steps, fn = "plain", 0, lambda q: encode_plain(b, q).data
            toks = statistics.mean(len(q) + 2 for q in queries)
        elif kind == "latent":
            name, steps = f"latent(K={n})", n
            fn = (lambda K: lambda q: encode_latent(b, q, K).v.data)(n)
            toks = statistics.mean(len(q) + 1 + n for q in queries)
        elif kind == "explicit":
            for q in queries:
                if len(q) + 2 + n > b.config.max_seq_len:
                    raise ValueError(f"bench_latency: R={n} plus query length {len(q)} exceeds "
                                     f"max_seq_len {b.config.max_seq_len}")
            name, steps = f"explicit(R={n})", n
            fn = (lambda R: lambda q: rewrite_then_encode(b, q, R))(n)
            toks = statistics.mean(2 * (len(q) + 1) + 2 * n + 1 for q in queries)
        else:
            raise ValueError(f"bench_latency: unknown mode {kind!r}")
        with ad.no_grad():
            ms = []
            for _ in range(repeats):
                ms.extend(_timed(fn, queries, warmup))
        ms_sorted = sorted(ms)
        p95 = ms_sorted[min(len(ms_sorted) - 1, int(math.ceil(0.95 * len(ms_sorted))) - 1)]
        timings[name] = ModeTiming(name, statistics.fmean(ms), statistics.median(ms), p95,
                                   len(ms), float(toks), steps)
    return LatencyReport(timings)
