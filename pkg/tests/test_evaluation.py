import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from laser.backbone import BackboneConfig, init_backbone
from laser.data import GenConfig, gen_multihop
from laser.encoder import EncodeMode, encode_corpus, encode_latent
from laser.evaluation import (bench_latency, evaluate, mrr, ndcg_at_k, rank_documents,
                              recall_at_k, rewrite_then_encode)


def brute_ndcg(ranking, gains, k):
    """DCG normalised by the best DCG over every ordering of the relevant docs."""
    dcg = sum(gains.get(d, 0) / math.log2(i + 2) for i, d in enumerate(ranking[:k]))
    best = max(sum(g / math.log2(i + 2) for i, g in enumerate(perm[:k]))
               for perm in itertools.permutations(gains.values()))
    return dcg / best if best else 0.0


class TestMetrics:
    def test_ideal(self):
        assert ndcg_at_k(["a", "b", "c"], {"a"}, 10) == 1.0

    def test_rank_two(self):
        assert abs(ndcg_at_k(["x", "a"], {"a"}, 10) - 1 / math.log2(3)) < 1e-12
        assert abs(1 / math.log2(3) - 0.63093) < 1e-5

    def test_graded_against_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            docs = [f"d{i}" for i in range(12)]
            rng.shuffle(docs)
            rel = {d: float(g) for d, g in zip(rng.choice(docs, 3, replace=False), rng.integers(1, 4, 3))}
            for k in (1, 3, 5, 10):
                assert abs(ndcg_at_k(docs, rel, k) - brute_ndcg(docs, rel, k)) < 1e-12

    def test_no_relevant(self):
        assert ndcg_at_k(["a"], set(), 10) == 0.0
        assert recall_at_k(["a"], set(), 10) == 0.0

    def test_recall_and_mrr(self):
        assert recall_at_k(["a", "b", "c"], {"b", "z"}, 2) == 0.5
        assert recall_at_k(["a", "b", "c"], {"z"}, 3) == 0.0
        assert mrr(["a", "b", "c", "d"], {"d"}) == 0.25
        assert mrr(["a", "b"], {"z"}) == 0.0

    def test_duplicates_and_k(self):
        with pytest.raises(ValueError, match="duplicate"):
            ndcg_at_k(["a", "a"], {"a"}, 10)
        with pytest.raises(ValueError):
            recall_at_k(["a"], {"a"}, 0)
        with pytest.raises(ValueError):
            mrr(["a", "a"], {"a"})

    @given(st.permutations(list(range(15))), st.sets(st.integers(0, 14), min_size=1, max_size=4),
           st.integers(1, 15))
    @settings(max_examples=200)
    def test_properties(self, ranking, rel, k):
        vals = [ndcg_at_k(ranking, rel, k), recall_at_k(ranking, rel, k), mrr(ranking, rel, k)]
        assert all(0 <= v <= 1 for v in vals)
        recalls = [recall_at_k(ranking, rel, j) for j in range(1, 16)]
        assert recalls == sorted(recalls)
        ideal = sorted(rel) + [d for d in ranking if d not in rel]
        assert ndcg_at_k(ideal, rel, k) == 1.0
        tail = ranking[k:]
        shuffled = ranking[:k] + [d for d in reversed(tail)]
        assert ndcg_at_k(shuffled, rel, k) == vals[0]


class TestRanking:
    def test_ties_by_doc_id(self):
        q = np.array([[1.0, 0.0]])
        d = np.array([[0.0, 1.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
        assert rank_documents(q, d, ["z", "b", "m", "a"], depth=4) == [["m", "a", "b", "z"]]


@pytest.fixture(scope="module")
def small():
    gen = GenConfig(n_keys=40, n_examples=40, n_eval=20, corpus_size=120, seed=3)
    task = gen_multihop(gen)
    b = init_backbone(BackboneConfig(model_dim=16, n_layers=1, n_heads=2, seed=3))
    return task, b


class TestEvaluate:
    def test_oracle_embedding_is_perfect(self, small):
        task, _ = small
        keys = list(GenConfig(n_keys=40).key_ids)
        positives = {ex.meta["positive_id"] for ex in task.eval.examples}
        docs = [d for d in task.corpus.docs if d.doc_id in positives]
        onehot = np.zeros((len(docs), len(keys)), np.float32)
        for i, d in enumerate(docs):
            onehot[i, [t - keys[0] for t in d.tokens if t in keys][0]] = 1
        qv = np.zeros((len(task.eval.examples), len(keys)), np.float32)
        for i, ex in enumerate(task.eval.examples):
            qv[i, ex.meta["chain"][-1] - keys[0]] = 1
        ids = [d.doc_id for d in docs]
        for ex, r in zip(task.eval.examples, rank_documents(qv, onehot, ids)):
            assert ndcg_at_k(r, {ex.meta["positive_id"]}, 10) == 1.0

    def test_against_direct_reimplementation(self, small):
        task, b = small
        exs = task.eval.examples[:20]
        res = evaluate(b, exs, task.corpus, "latent", 2)
        dv = encode_corpus(b, [d.tokens for d in task.corpus.docs], EncodeMode("latent", 2))
        ids = [d.doc_id for d in task.corpus.docs]
        nd, rr = [], []
        for ex in exs:
            q = encode_latent(b, ex.query, 2).v.data[0].astype(np.float64)
            s = dv.astype(np.float64) @ q
            order = sorted(range(len(ids)), key=lambda i: (-s[i], ids[i]))
            rank = [ids[i] for i in order].index(ex.meta["positive_id"]) + 1
            nd.append(1 / math.log2(rank + 1) if rank <= 10 else 0.0)
            rr.append(1 / rank if rank <= 10 else 0.0)
        assert abs(res.ndcg_at_10 - np.mean(nd)) < 1e-6
        assert abs(res.mrr - np.mean(rr)) < 1e-6
        assert res.n_queries == 20 and len(res.rankings) == 20

    def test_plain_docs_shared_across_k(self, small):
        task, b = small
        fps = {evaluate(b, task.eval.examples[:5], task.corpus, "latent", K,
                        doc_mode=EncodeMode("plain")).corpus_fingerprint for K in (1, 3, 6)}
        assert len(fps) == 1

    def test_deterministic(self, small):
        task, b = small
        a = evaluate(b, task.eval.examples[:5], task.corpus, "explicit", 3)
        c = evaluate(b, task.eval.examples[:5], task.corpus, "explicit", 3)
        assert a.to_dict(True) == c.to_dict(True)

    def test_overflow_skipped(self, small):
        task, b = small
        ex = task.eval.examples[0]
        long = type(ex)(ex.query * 30, ex.segments, ex.positive, ex.hard_negatives, ex.meta)
        res = evaluate(b, [ex, long], task.corpus, "latent", 3)
        assert res.skipped == [1] and res.n_queries == 1

    def test_metric_bounds(self, small):
        task, b = small
        r = evaluate(b, task.eval.examples, task.corpus, "plain", 0, doc_mode=EncodeMode("plain"))
        assert 0 <= r.recall_at_1 <= r.recall_at_5 <= r.recall_at_10 <= 1
        assert 0 <= r.ndcg_at_10 <= 1 and 0 <= r.mrr <= 1


@pytest.fixture(scope="module")
def default_backbone():
    return init_backbone(BackboneConfig(seed=0))


class TestBench:
    @pytest.fixture
    def b(self, default_backbone):
        return default_backbone

    def test_report_shape(self, b):
        qs = [[10 + i, 20, 30, 40] for i in range(4)]
        rep = bench_latency(b, qs, [("plain", 0), ("latent", 1), ("latent", 3), ("explicit", 8)], warmup=1)
        for t in rep.timings.values():
            assert t.mean_ms > 0 and t.samples == 4
        d = rep.to_dict()
        assert "latent(K=3)/plain" in d and "latent(K=3)/explicit(R=8)" in d
        assert rep.timings["latent(K=3)"].median_ms > rep.timings["latent(K=1)"].median_ms

    def test_plain_stable(self, b):
        qs = [list(range(10, 40))] * 10
        a = bench_latency(b, qs, [("plain", 0)], warmup=2).timings["plain"].mean_ms
        c = bench_latency(b, qs, [("plain", 0)], warmup=2).timings["plain"].mean_ms
        assert 0.8 < a / c < 1.25

    def test_rewrite_overflow(self, b):
        with pytest.raises(ValueError, match="max_seq_len"):
            bench_latency(b, [[5] * 100], [("explicit", 64)])
        with pytest.raises(ValueError):
            rewrite_then_encode(b, [5] * 100, 64)

    def test_rewrite_output_unit(self, b):
        v = rewrite_then_encode(b, [5, 6, 7], 4)
        assert abs(np.linalg.norm(v) - 1) < 1e-5
