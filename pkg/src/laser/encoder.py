"""Query and document encoders over a shared backbone.

Three pathways:

* plain: ``[INSTR; q; EOS]``, one pass, normalized hidden state at EOS.
* latent: ``[INSTR; q]`` followed by K soft tokens generated one at a time.
  Each soft token is the expected token embedding under the model's own
  next-token distribution; the representation is the normalized mean of the
  K hidden states produced at the soft-token positions.
* explicit: ``[INSTR; q; seg_1; ...; seg_M; EOS]`` in one pass, returning the
  normalized EOS state and the hidden state at the last token of each segment.

Every function works on a list of sequences at once (rows are stacked, see
``backbone.forward``); single-sequence helpers wrap the batched versions.
Documents are encoded without the instruction token.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import EOS, INSTR, AttnCache, Backbone, embed_tokens, forward, lm_logits


@dataclass(frozen=True)
class EncodeMode:
    kind: str = "latent"
    K: int = 3

    def __post_init__(self):
        if self.kind not in ("plain", "latent", "explicit"):
            raise ValueError(f"unknown encode mode {self.kind!r}")
        if self.kind == "latent" and self.K < 1:
            raise ValueError("latent mode needs K >= 1")


@dataclass
class LatentEncoding:
    """Latent-view output for N sequences.

    ``v`` is [N x m]; ``trajectory`` and ``soft_tokens`` are [N*K x m] with the
    K rows of sequence i at ``i*K:(i+1)*K``.
    """
    v: Tensor
    trajectory: Tensor
    soft_tokens: Tensor
    K: int

    def states(self, i: int = 0) -> np.ndarray:
        return self.trajectory.data[i * self.K:(i + 1) * self.K]


@dataclass
class ExplicitEncoding:
    """Explicit-view output for N sequences; ``segment_states`` stacks the M_i
    boundary states of every sequence, ``offsets[i]:offsets[i+1]`` being
    sequence i's rows."""
    v_star: Tensor
    segment_states: Tensor
    counts: list[int]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.counts)]).astype(np.int64)

    @property
    def M(self) -> int:
        if len(self.counts) != 1:
            raise ValueError("M is per sequence; use counts for batches")
        return self.counts[0]


def soft_token(logits: Tensor, E: Tensor, temperature: float = 1.0) -> Tensor:
    """softmax(logits / temperature) @ E, row-wise."""
    if not np.isfinite(logits.data).all():
        raise ValueError("soft_token: non-finite logits")
    return ad.softmax_rows(logits, temperature) @ E


def _stack(b: Backbone, seqs: Sequence[Sequence[int]]):
    """Embed and stack token sequences; returns rows, per-row sequence ids and
    the row index of each sequence's last token."""
    lens = np.array([len(s) for s in seqs], dtype=np.int64)
    flat = [t for s in seqs for t in s]
    x = embed_tokens(b, flat)
    seq_ids = np.repeat(np.arange(len(seqs)), lens)
    last = np.cumsum(lens) - 1
    return x, seq_ids, last


def _check_len(b: Backbone, lengths, budget: int | None, what: str) -> None:
    limit = b.config.max_seq_len if budget is None else min(budget, b.config.max_seq_len)
    for i, n in enumerate(lengths):
        if n > limit:
            raise ValueError(f"{what} {i}: length {n} exceeds budget {limit}")


def encode_latent_batch(b: Backbone, seqs: Sequence[Sequence[int]], K: int,
                        temperature: float = 1.0, instruct: bool = True,
                        use_cache: bool = True) -> LatentEncoding:
    if K < 1:
        raise ValueError("encode_latent: K must be >= 1 (use encode_plain for K = 0)")
    if not seqs:
        raise ValueError("encode_latent: no sequences")
    prefix = [([INSTR] if instruct else []) + list(s) for s in seqs]
    for i, p in enumerate(prefix):
        if not p:
            raise ValueError(f"encode_latent: sequence {i} is empty")
    _check_len(b, [len(p) + K for p in prefix], None, "sequence")
    n = len(prefix)
    plen = np.array([len(p) for p in prefix], dtype=np.int64)
    if use_cache:
        x, seq_ids, last = _stack(b, prefix)
        hidden, cache = forward(b, x, seq_ids=seq_ids)
        h = ad.take_rows(hidden, last)
        steps, toks = [], []
        ids = np.arange(n)
        for j in range(K):
            t = soft_token(lm_logits(b, h), b.E, temperature)
            toks.append(t)
            h, cache = forward(b, t, cache, seq_ids=ids, positions=plen + j)
            steps.append(h)
    else:
        steps, toks = _latent_recompute(b, prefix, K, temperature)
    # step-major [K*N] -> sequence-major [N*K]
    order = (np.arange(K)[None, :] * n + np.arange(n)[:, None]).reshape(-1)
    traj = ad.take_rows(ad.concat_rows(steps), order)
    soft = ad.take_rows(ad.concat_rows(toks), order)
    v = ad.l2_normalize_rows(ad.mean_rows(traj, block=K))
    return LatentEncoding(v, traj, soft, K)


def _latent_recompute(b: Backbone, prefix, K, temperature):
    """Cache-free reference: every step re-runs the full sequence."""
    steps, toks = [], []
    per_seq_toks: list[list[Tensor]] = [[] for _ in prefix]
    h_rows = []
    for i, p in enumerate(prefix):
        hidden, _ = forward(b, embed_tokens(b, p))
        h_rows.append(ad.take_rows(hidden, [len(p) - 1]))
    h = ad.concat_rows(h_rows)
    for j in range(K):
        t = soft_token(lm_logits(b, h), b.E, temperature)
        toks.append(t)
        rows = []
        for i, p in enumerate(prefix):
            per_seq_toks[i].append(ad.take_rows(t, [i]))
            x = ad.concat_rows([embed_tokens(b, p)] + per_seq_toks[i])
            hidden, _ = forward(b, x)
            rows.append(ad.take_rows(hidden, [x.shape[0] - 1]))
        h = ad.concat_rows(rows)
        steps.append(h)
    return steps, toks


def encode_latent(b: Backbone, ids: Sequence[int], K: int, temperature: float = 1.0,
                  instruct: bool = True, use_cache: bool = True) -> LatentEncoding:
    return encode_latent_batch(b, [ids], K, temperature, instruct, use_cache)


def encode_plain_batch(b: Backbone, seqs: Sequence[Sequence[int]], instruct: bool = True,
                       budget: int | None = None) -> Tensor:
    full = [([INSTR] if instruct else []) + list(s) + [EOS] for s in seqs]
    _check_len(b, [len(f) for f in full], budget, "sequence")
    x, seq_ids, last = _stack(b, full)
    hidden, _ = forward(b, x, seq_ids=seq_ids)
    return ad.l2_normalize_rows(ad.take_rows(hidden, last))


def encode_plain(b: Backbone, ids: Sequence[int], instruct: bool = True) -> Tensor:
    return encode_plain_batch(b, [ids], instruct)


def encode_explicit_batch(b: Backbone, queries: Sequence[Sequence[int]],
                          segments: Sequence[Sequence[Sequence[int]]],
                          budget: int | None = None) -> ExplicitEncoding:
    if len(queries) != len(segments):
        raise ValueError("encode_explicit: one segment list per query required")
    full, bounds = [], []
    for qi, (q, segs) in enumerate(zip(queries, segments)):
        if len(segs) < 1:
            raise ValueError(f"encode_explicit: query {qi} has no rationale segments")
        seq = [INSTR] + list(q)
        ends = []
        for si, s in enumerate(segs):
            if len(s) == 0:
                raise ValueError(f"encode_explicit: query {qi} segment {si} is empty")
            seq.extend(s)
            ends.append(len(seq) - 1)
        seq.append(EOS)
        full.append(seq)
        bounds.append(ends)
    _check_len(b, [len(f) for f in full], budget, "explicit input")
    x, seq_ids, last = _stack(b, full)
    hidden, _ = forward(b, x, seq_ids=seq_ids)
    starts = np.concatenate([[0], np.cumsum([len(f) for f in full])[:-1]])
    seg_rows = [starts[i] + e for i, ends in enumerate(bounds) for e in ends]
    v_star = ad.l2_normalize_rows(ad.take_rows(hidden, last))
    states = ad.take_rows(hidden, seg_rows)
    return ExplicitEncoding(v_star, states, [len(e) for e in bounds])


def encode_explicit(b: Backbone, query_ids: Sequence[int], segment_ids: Sequence[Sequence[int]],
                    budget: int | None = None) -> ExplicitEncoding:
    return encode_explicit_batch(b, [query_ids], [segment_ids], budget)


def encode_batch(b: Backbone, seqs: Sequence[Sequence[int]], mode: EncodeMode,
                 instruct: bool = True, temperature: float = 1.0) -> Tensor:
    if mode.kind == "plain":
        return encode_plain_batch(b, seqs, instruct)
    if mode.kind == "latent":
        return encode_latent_batch(b, seqs, mode.K, temperature, instruct).v
    raise ValueError("encode_batch: explicit mode needs rationale segments")


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("LASER_THREADS", "1")))
    except ValueError:
        return 1


def encode_corpus(b: Backbone, docs: Sequence[Sequence[int]], mode: EncodeMode,
                  chunk: int = 64, workers: int | None = None, temperature: float = 1.0,
                  instruct: bool = False) -> np.ndarray:
    """Encode documents into a unit-row [N x m] matrix without building a graph.

    Documents are processed in fixed chunks of ``chunk`` rows; chunks are the
    unit of parallel work, so any worker count gives bitwise-identical output.
    """
    if mode.kind not in ("plain", "latent"):
        raise ValueError(f"encode_corpus: mode {mode.kind!r} not supported for documents")
    extra = (1 if instruct else 0) + (mode.K if mode.kind == "latent" else 1)
    for i, d in enumerate(docs):
        if len(d) + extra > b.config.max_seq_len:
            raise ValueError(f"encode_corpus: document {i} (length {len(d)}) overflows "
                             f"max_seq_len {b.config.max_seq_len}")
        if mode.kind == "latent" and not instruct and len(d) == 0:
            raise ValueError(f"encode_corpus: document {i} is empty")
    m = b.config.model_dim
    if not docs:
        return np.zeros((0, m), dtype=b.dtype)
    pieces = [docs[i:i + chunk] for i in range(0, len(docs), chunk)]

    def run(piece):
        with ad.no_grad():
            return encode_batch(b, piece, mode, instruct, temperature).data.copy()

    workers = _worker_count() if workers is None else workers
    if workers <= 1 or len(pieces) == 1:
        outs = [run(p) for p in pieces]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(run, pieces))
    return np.concatenate(outs, axis=0)


def fingerprint(mat: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(mat).tobytes()).hexdigest()[:16]


EMB_MAGIC = b"LSEREMB1"


def write_embeddings(path, vectors: np.ndarray, doc_ids: Sequence[str]) -> None:
    """Binary dump: magic, u32 count, u32 dim, f32 LE rows, then NUL-terminated ids."""
    vectors = np.asarray(vectors)
    n, m = vectors.shape
    if len(doc_ids) != n:
        raise ValueError(f"write_embeddings: {n} vectors but {len(doc_ids)} ids")
    with open(path, "wb") as f:
        f.write(EMB_MAGIC)
        f.write(np.array([n, m], dtype="<u4").tobytes())
        f.write(vectors.astype("<f4").tobytes())
        for d in doc_ids:
            raw = d.encode("utf-8")
            if b"\0" in raw:
                raise ValueError(f"write_embeddings: doc id {d!r} contains NUL")
            f.write(raw + b"\0")


def read_embeddings(path) -> tuple[np.ndarray, list[str]]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != EMB_MAGIC:
        raise ValueError(f"{path}: not an embedding dump (bad magic)")
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated header")
    n, m = (int(x) for x in np.frombuffer(raw, dtype="<u4", count=2, offset=8))
    end = 16 + 4 * n * m
    if len(raw) < end:
        raise ValueError(f"{path}: truncated vector block")
    vecs = np.frombuffer(raw, dtype="<f4", count=n * m, offset=16).reshape(n, m).copy()
    ids = raw[end:].split(b"\0")
    if len(ids) != n + 1 or ids[-1] != b"":
        raise ValueError(f"{path}: expected {n} NUL-terminated ids")
    return vecs, [i.decode("utf-8") for i in ids[:-1]]
