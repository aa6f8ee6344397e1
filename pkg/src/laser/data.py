"""Synthetic multi-hop retrieval task.

Keys live on one random cycle, which defines a successor ("link") for every
key. A chain of H hops starting at key k1 is k1 -> succ(k1) -> ... -> k_{H+1}.
A query mentions k1 among noise tokens, the rationale states one link per
segment, and the relevant document is the one built around k_{H+1}. Hard
negatives are the documents of k1..k_H: they share the query's surface form
(or the rationale's intermediate keys) but are wrong.

Every key owns exactly one document, so the document of an early chain key is
always the positive of some other chain. Eval chains start at keys that never
start a training chain and whose cycle neighbours do, so for H >= 2 each eval
link already occurs somewhere in the training rationales. Documents answering
an eval chain are withheld from training hard negatives.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import N_SPECIAL

log = logging.getLogger(__name__)

FORMAT = "laser-ds"
VERSION = 1


@dataclass(frozen=True)
class GenConfig:
    vocab_size: int = 512
    n_keys: int = 256
    hops: int = 2
    n_examples: int = 2000
    n_eval: int = 200
    corpus_size: int = 1000
    query_noise: int = 4
    doc_noise: int = 4
    eval_fraction: float = 0.15
    seed: int = 0
    max_query_len: int = 32
    max_explicit_len: int = 64

    def validate(self) -> None:
        if self.hops < 1:
            raise ValueError("hops must be >= 1")
        n_noise = self.vocab_size - N_SPECIAL - self.n_keys
        if self.n_keys < 2 * (self.hops + 2):
            raise ValueError(f"n_keys={self.n_keys} too small for collision-free {self.hops}-hop chains")
        if n_noise < max(self.query_noise, self.doc_noise, 1):
            raise ValueError(f"vocab_size={self.vocab_size} leaves {n_noise} noise tokens")
        if self.corpus_size < self.n_keys:
            raise ValueError(f"corpus_size={self.corpus_size} must cover one document per key ({self.n_keys})")
        if 1 + 1 + self.query_noise > self.max_query_len:
            raise ValueError("query does not fit max_query_len")
        if 1 + 1 + self.query_noise + 2 * self.hops + 1 > self.max_explicit_len:
            raise ValueError(f"{self.hops}-hop rationale exceeds max_explicit_len={self.max_explicit_len}")
        if not 0 < self.eval_fraction < 0.5:
            raise ValueError("eval_fraction must lie in (0, 0.5)")
        if self.n_examples < 1 or self.n_eval < 1:
            raise ValueError("n_examples and n_eval must be >= 1")

    @property
    def key_ids(self) -> range:
        return range(N_SPECIAL, N_SPECIAL + self.n_keys)

    @property
    def noise_ids(self) -> range:
        return range(N_SPECIAL + self.n_keys, self.vocab_size)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingExample:
    query: list[int]
    segments: list[list[int]]
    positive: list[int]
    hard_negatives: list[list[int]]
    meta: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return len(self.segments)

    @property
    def rationale(self) -> list[int]:
        return [t for s in self.segments for t in s]


@dataclass
class Doc:
    doc_id: str
    tokens: list[int]


@dataclass
class Dataset:
    examples: list[TrainingExample]
    gen_config: dict | None = None


@dataclass
class Corpus:
    docs: list[Doc]
    gen_config: dict | None = None

    def index(self) -> dict[str, int]:
        return {d.doc_id: i for i, d in enumerate(self.docs)}


@dataclass
class MultiHopTask:
    train: Dataset
    eval: Dataset
    corpus: Corpus
    successor: dict[int, int]


def _key_doc_id(key: int) -> str:
    return f"k{key:05d}"


def gen_multihop(cfg: GenConfig) -> MultiHopTask:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    keys = np.array(cfg.key_ids)
    noise = np.array(cfg.noise_ids)
    n = cfg.n_keys

    cycle = rng.permutation(keys)
    successor = {int(cycle[i]): int(cycle[(i + 1) % n]) for i in range(n)}

    # eval starts: non-adjacent cycle positions, so both neighbours start train chains
    candidates = np.arange(0, n - (n % 2), 2)
    n_eval_chains = max(1, int(round(cfg.eval_fraction * n)))
    eval_pos = np.sort(rng.choice(candidates, size=n_eval_chains, replace=False))
    eval_starts = [int(cycle[p]) for p in eval_pos]
    eval_set = set(eval_starts)
    train_starts = [int(k) for k in cycle if int(k) not in eval_set]

    docs, key_doc = [], {}
    seen = set()
    for k in keys:
        body = [int(k)] + [int(t) for t in rng.choice(noise, size=cfg.doc_noise)]
        order = rng.permutation(len(body))
        toks = [body[i] for i in order]
        docs.append(Doc(_key_doc_id(int(k)), toks))
        key_doc[int(k)] = toks
        seen.add(tuple(toks))
    d = 0
    while len(docs) < cfg.corpus_size:
        toks = [int(t) for t in rng.choice(noise, size=cfg.doc_noise + 1)]
        if tuple(toks) in seen:
            continue
        seen.add(tuple(toks))
        docs.append(Doc(f"n{d:05d}", toks))
        d += 1

    def chain(start: int) -> list[int]:
        c = [start]
        for _ in range(cfg.hops):
            c.append(successor[c[-1]])
        return c

    # documents that answer an eval chain never enter training, not even as negatives
    held_out = {chain(k)[-1] for k in eval_starts}

    def make(start: int, train: bool) -> TrainingExample:
        c = chain(start)
        body = [c[0]] + [int(t) for t in rng.choice(noise, size=cfg.query_noise)]
        query = [body[i] for i in rng.permutation(len(body))]
        segments = [[c[i], c[i + 1]] for i in range(cfg.hops)]
        negs = [c[i] for i in rng.permutation(cfg.hops)]
        if train:
            # with H = 1 the only early key may itself be held out; keep it then
            negs = [k for k in negs if k not in held_out] or negs
        return TrainingExample(
            query=query,
            segments=segments,
            positive=list(key_doc[c[-1]]),
            hard_negatives=[list(key_doc[k]) for k in negs],
            meta={"hops": cfg.hops, "chain": c, "chain_id": c[0],
                  "positive_id": _key_doc_id(c[-1]),
                  "hard_negative_ids": [_key_doc_id(k) for k in negs]},
        )

    train = [make(train_starts[i], True) for i in rng.choice(len(train_starts), size=cfg.n_examples)]
    evals = [make(eval_starts[i], False) for i in rng.choice(len(eval_starts), size=cfg.n_eval)]
    gc = cfg.to_dict()
    return MultiHopTask(Dataset(train, gc), Dataset(evals, gc), Corpus(docs, gc), successor)


def check_example(ex: TrainingExample, cfg: GenConfig) -> None:
    """Raise AssertionError unless ``ex`` satisfies the ground-truth property."""
    keys = set(cfg.key_ids)
    final = ex.meta["chain"][-1]
    assert ex.M >= 1, "no rationale segments"
    assert all(len(s) > 0 for s in ex.segments), "empty segment"
    assert final in ex.positive, "final key missing from positive"
    assert final in ex.segments[-1], "final key missing from last segment"
    assert final not in ex.query, "final key leaks into query"
    assert all(ex.positive != h for h in ex.hard_negatives), "hard negative equals positive"
    assert [t for t in ex.query if t in keys] == [ex.meta["chain"][0]], "query must mention only k1"
    assert 1 + len(ex.query) + 1 <= cfg.max_query_len
    assert 1 + len(ex.query) + len(ex.rationale) + 1 <= cfg.max_explicit_len


def symbolic_solve(query: Sequence[int], links: dict[int, int], hops: int, corpus: Corpus,
                   key_range: range) -> str | None:
    """Follow ``hops`` links from the query's key and return the id of the one
    corpus document containing the end key."""
    found = [t for t in query if t in key_range]
    if len(found) != 1:
        return None
    k = found[0]
    for _ in range(hops):
        if k not in links:
            return None
        k = links[k]
    hits = [d.doc_id for d in corpus.docs if k in d.tokens]
    return hits[0] if len(hits) == 1 else None


def links_from_rationales(examples: Sequence[TrainingExample]) -> dict[int, int]:
    links: dict[int, int] = {}
    for ex in examples:
        for s in ex.segments:
            links[s[0]] = s[-1]
    return links


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    examples: list[TrainingExample]
    docs: list[list[int]]
    positive_index: np.ndarray
    indices: list[int]

    @property
    def N(self) -> int:
        return len(self.examples)


def make_batch(examples: Sequence[TrainingExample], indices: Sequence[int],
               hard_negs_per_query: int = 1, rng: np.random.Generator | None = None) -> Batch:
    """Pool positives and hard negatives of the selected examples into one
    deduplicated document list shared by every query in the batch.

    A query whose positive content repeats an earlier query's positive is
    replaced by another example (drawn from ``rng``, or the next unused index).
    """
    indices = list(indices)
    n = len(examples)
    if len(set(indices)) != len(indices):
        raise ValueError("make_batch: indices must be distinct")
    if any(i < 0 or i >= n for i in indices):
        raise ValueError(f"make_batch: index out of range for {n} examples")
    used = set(indices)
    pool = (rng.permutation(n) if rng is not None else np.arange(n)).tolist()
    chosen, positives = [], set()
    for i in indices:
        while tuple(examples[i].positive) in positives:
            repl = next((j for j in pool if j not in used
                         and tuple(examples[j].positive) not in positives), None)
            if repl is None:
                raise ValueError("make_batch: cannot find an example with a distinct positive")
            log.info("make_batch: example %d repeats a positive, resampled as %d", i, repl)
            used.add(repl)
            i = repl
        chosen.append(i)
        positives.add(tuple(examples[i].positive))

    docs, where = [], {}

    def add(toks):
        key = tuple(toks)
        if key not in where:
            where[key] = len(docs)
            docs.append(list(toks))
        return where[key]

    pos_idx = []
    for i in chosen:
        ex = examples[i]
        pos_idx.append(add(ex.positive))
        for h in ex.hard_negatives[:hard_negs_per_query]:
            add(h)
    return Batch([examples[i] for i in chosen], docs, np.array(pos_idx, dtype=np.int64), chosen)


# ---------------------------------------------------------------------------
# file I/O (JSON lines with a header record)
# ---------------------------------------------------------------------------


def _write(path, kind: str, gen_config, records: list[dict]) -> None:
    header = {"format": FORMAT, "version": VERSION, "kind": kind, "count": len(records),
              "gen_config": gen_config}
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def _read(path, kind: str) -> tuple[dict, list[dict]]:
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        lines = f.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ValueError(f"{path}: empty file, missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}:1: malformed header ({e.msg})") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise ValueError(f"{path}:1: not a {FORMAT} file")
    if header.get("version") != VERSION:
        raise ValueError(f"{path}:1: unsupported version {header.get('version')!r}, expected {VERSION}")
    if header.get("kind") != kind:
        raise ValueError(f"{path}:1: file holds {header.get('kind')!r} records, expected {kind!r}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise ValueError("record is not an object")
        except (json.JSONDecodeError, ValueError) as e:
            raise ValueError(f"{path}:{lineno}: malformed record (last good line {lineno - 1}): {e}") from None
        records.append(rec)
    if header.get("count") is not None and header["count"] != len(records):
        raise ValueError(f"{path}: truncated, header promises {header['count']} records but found "
                         f"{len(records)} (last good line {len(records) + 1})")
    return header, records


def save_dataset(path, dataset: Dataset) -> None:
    recs = [{"query": e.query, "segments": e.segments, "positive": e.positive,
             "hard_negatives": e.hard_negatives, "meta": e.meta} for e in dataset.examples]
    _write(path, "examples", dataset.gen_config, recs)


def load_dataset(path) -> Dataset:
    header, recs = _read(path, "examples")
    out = []
    for lineno, r in enumerate(recs, start=2):
        try:
            out.append(TrainingExample(r["query"], r["segments"], r["positive"],
                                       r["hard_negatives"], r.get("meta", {})))
        except KeyError as e:
            raise ValueError(f"{path}:{lineno}: missing field {e.args[0]!r}") from None
    return Dataset(out, header.get("gen_config"))


def save_corpus(path, corpus: Corpus) -> None:
    _write(path, "corpus", corpus.gen_config, [{"doc_id": d.doc_id, "tokens": d.tokens}
                                               for d in corpus.docs])


def load_corpus(path) -> Corpus:
    header, recs = _read(path, "corpus")
    docs = []
    for lineno, r in enumerate(recs, start=2):
        try:
            docs.append(Doc(r["doc_id"], r["tokens"]))
        except KeyError as e:
            raise ValueError(f"{path}:{lineno}: missing field {e.args[0]!r}") from None
    return Corpus(docs, header.get("gen_config"))
