"""Training objectives: contrastive loss for both views, score-distribution
distillation from the explicit view to the latent view at the output and along
the latent trajectory, and their weighted sum.

All scores are dot products of unit vectors (cosine similarities). Losses over
several queries are averaged over queries.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 10.0
    lambda3: float = 0.1
    tau: float = 0.02
    tau_kd: float = 0.02

    def __post_init__(self):
        if not (self.tau > 0 and self.tau_kd > 0):
            raise ValueError("tau and tau_kd must be positive")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    cl_latent: float
    cl_explicit: float
    kd_out: float
    kd_mid: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CandidateSet:
    """Pooled documents for a batch: every query scores every row of
    ``doc_vectors``; ``positive_index[i]`` is query i's positive row."""
    doc_vectors: Tensor
    positive_index: np.ndarray

    def __post_init__(self):
        self.positive_index = np.atleast_1d(np.asarray(self.positive_index, dtype=np.int64))
        B = self.doc_vectors.shape[0]
        if B == 0:
            raise ValueError("CandidateSet: no candidate documents")
        bad = (self.positive_index < 0) | (self.positive_index >= B)
        if bad.any():
            raise ValueError(f"CandidateSet: positive index {self.positive_index[bad].tolist()} "
                             f"out of range for {B} candidates")
        norms = np.linalg.norm(self.doc_vectors.data.astype(np.float64), axis=1)
        if np.abs(norms - 1.0).max() > 1e-5:
            raise ValueError("CandidateSet: document vectors must be unit-norm")

    @property
    def size(self) -> int:
        return self.doc_vectors.shape[0]


def scores(q: Tensor, candidates: CandidateSet) -> Tensor:
    return q @ ad.transpose(candidates.doc_vectors)


def info_nce(q_vec: Tensor, candidates: CandidateSet, tau: float) -> Tensor:
    """Mean over queries of -log softmax(scores / tau)[positive]."""
    if not tau > 0:
        raise ValueError("info_nce: tau must be positive")
    n = q_vec.shape[0]
    if candidates.positive_index.shape[0] != n:
        raise ValueError(f"info_nce: {n} queries but {candidates.positive_index.shape[0]} positives")
    logp = ad.log_softmax_rows(scores(q_vec, candidates), tau)
    picked = ad.take(logp, np.arange(n), candidates.positive_index)
    return ad.scale(ad.sum_all(picked), -1.0 / n)


def kl_div(p, q) -> float:
    """KL(p || q) of two explicit distributions, with 0 * log(0/x) = 0."""
    p = ad.as_tensor(p)
    q = ad.as_tensor(q)
    for name, d in (("p", p), ("q", q)):
        if (d.data < 0).any():
            raise ValueError(f"kl_div: {name} has negative entries")
        if np.abs(d.data.sum(axis=1) - 1.0).max() > 1e-5:
            raise ValueError(f"kl_div: {name} does not sum to 1")
    return float(ad.kl_div(p, q).data.sum())


def _kl_logits(teacher: Tensor, student: Tensor, tau: float, detach_teacher: bool) -> Tensor:
    """Row-wise KL(softmax(teacher/tau) || softmax(student/tau)) -> [n x 1]."""
    if detach_teacher:
        teacher = teacher.detach()
    t_log = ad.log_softmax_rows(teacher, tau)
    s_log = ad.log_softmax_rows(student, tau)
    return ad.sum_cols(ad.mul(ad.exp(t_log), ad.sub(t_log, s_log)))


def kd_output(teacher_q: Tensor, student_q: Tensor, candidates: CandidateSet, tau_kd: float,
              detach_teacher: bool = True) -> Tensor:
    if candidates.size == 0:
        raise ValueError("kd_output: empty candidates")
    if teacher_q.shape != student_q.shape:
        raise ValueError(f"kd_output: teacher {teacher_q.shape} vs student {student_q.shape}")
    kl = _kl_logits(scores(teacher_q, candidates), scores(student_q, candidates), tau_kd,
                    detach_teacher)
    return ad.mean_all(kl)


def downsample_indices(M: int, K: int) -> list[int]:
    """1-based segment index for each latent step: floor(i*M/K), clamped to [1, M]."""
    if M < 1 or K < 1:
        raise ValueError(f"downsample_indices: need M >= 1 and K >= 1, got M={M}, K={K}")
    return [min(max((i * M) // K, 1), M) for i in range(1, K + 1)]


def kd_trajectory(teacher_states: Tensor, student_states: Tensor, candidates: CandidateSet,
                  tau_kd: float, K: int | None = None, teacher_counts: Sequence[int] | None = None,
                  detach_teacher: bool = True) -> Tensor:
    """Mean over queries and latent steps of KL between the document-score
    distributions of the selected teacher segment state and the student state.

    ``student_states`` holds K rows per query; ``teacher_states`` holds
    ``teacher_counts[i]`` rows for query i (defaults: one query).
    """
    m = candidates.doc_vectors.shape[1]
    for name, t in (("teacher", teacher_states), ("student", student_states)):
        if t.shape[1] != m:
            raise ValueError(f"kd_trajectory: {name} state width {t.shape[1]} != {m}")
    if teacher_counts is None:
        teacher_counts = [teacher_states.shape[0]]
    n = len(teacher_counts)
    K = student_states.shape[0] // n if K is None else K
    if K < 1 or student_states.shape[0] != n * K:
        raise ValueError(f"kd_trajectory: {student_states.shape[0]} student rows for {n} queries")
    if sum(teacher_counts) != teacher_states.shape[0]:
        raise ValueError("kd_trajectory: teacher_counts do not match teacher rows")
    offsets = np.concatenate([[0], np.cumsum(teacher_counts)])
    sel = [offsets[i] + j - 1 for i, M in enumerate(teacher_counts)
           for j in downsample_indices(M, K)]
    t_hat = ad.l2_normalize_rows(ad.take_rows(teacher_states, sel))
    s_hat = ad.l2_normalize_rows(student_states)
    kl = _kl_logits(scores(t_hat, candidates), scores(s_hat, candidates), tau_kd, detach_teacher)
    return ad.mean_all(kl)


TERMS = ("cl_latent", "cl_explicit", "kd_out", "kd_mid")


def total_loss(parts: dict, w: LossWeights) -> Tensor:
    """cl_latent + l1*cl_explicit + l2*kd_out + l3*kd_mid.

    ``parts`` maps term names to 1x1 tensors (or floats); missing terms and
    terms with zero weight are left out entirely.
    """
    coef = {"cl_latent": 1.0, "cl_explicit": w.lambda1, "kd_out": w.lambda2, "kd_mid": w.lambda3}
    total = None
    for name in TERMS:
        if name not in parts or parts[name] is None:
            continue
        t = ad.as_tensor(parts[name])
        if not np.isfinite(t.data).all():
            raise FloatingPointError(f"total_loss: term {name} is not finite")
        if coef[name] == 0:
            continue
        term = t if coef[name] == 1.0 else ad.scale(t, coef[name])
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("total_loss: no active terms")
    return total


def report(parts: dict, total: Tensor) -> LossReport:
    val = lambda k: float(parts[k].data[0, 0]) if parts.get(k) is not None else 0.0
    return LossReport(*(val(k) for k in TERMS), float(total.data[0, 0]))
