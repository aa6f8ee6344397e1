"""Dual-view self-distillation training.

Each step encodes the batch documents once, runs the latent view (student) and
the explicit view (teacher) over the same backbone, combines the four loss
terms, backpropagates through everything and applies one AdamW update.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Backbone, BackboneConfig, expected_shapes, from_named
from .data import Batch, TrainingExample, make_batch
from .encoder import (encode_explicit_batch, encode_latent_batch, encode_plain_batch)
from .losses import (CandidateSet, LossReport, LossWeights, info_nce, kd_output, kd_trajectory,
                     report, total_loss)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    warmup_ratio: float = 0.1
    epochs: int = 1
    batch_size: int = 8
    K_train: int = 3
    weights: LossWeights = field(default_factory=LossWeights)
    disable_explicit_view: bool = False
    disable_latent_view: bool = False
    disable_kd_out: bool = False
    disable_kd_mid: bool = False
    detach_teacher: bool = True
    seed: int = 0
    doc_mode: str = "latent"
    hard_negs_per_query: int = 1
    soft_temperature: float = 1.0
    max_query_len: int = 32
    max_explicit_len: int = 64
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    max_steps: int | None = None

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.warmup_ratio <= 1:
            raise ValueError("warmup_ratio must lie in [0, 1]")
        if self.K_train < 1 and not self.disable_latent_view:
            raise ValueError("K_train must be >= 1 unless the latent view is disabled")
        if self.doc_mode not in ("plain", "latent"):
            raise ValueError(f"doc_mode must be plain or latent, got {self.doc_mode!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def for_params(cls, params: Sequence[Tensor], betas=(0.9, 0.999), eps=1e-8,
                   weight_decay=0.01) -> OptimizerState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params],
                   0, tuple(betas), eps, weight_decay)


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], opt: OptimizerState,
               lr_t: float) -> None:
    """In-place AdamW update (decoupled weight decay, bias-corrected moments)."""
    if len(params) != len(grads) or len(params) != len(opt.m):
        raise ValueError("adamw_step: params, grads and optimizer state differ in length")
    for p, g in zip(params, grads):
        if p.data.shape != g.shape:
            raise ValueError(f"adamw_step: grad shape {g.shape} != param shape {p.data.shape}")
        if not np.isfinite(g).all():
            raise ValueError("adamw_step: non-finite gradient")
    opt.step += 1
    b1, b2 = opt.betas
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        dt = p.data.dtype.type
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        if opt.weight_decay:
            p.data *= dt(1.0 - lr_t * opt.weight_decay)
        p.data -= dt(lr_t) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(opt.eps))


def lr_schedule(step: int, total_steps: int, warmup_ratio: float, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` then linear decay to zero at ``total_steps``."""
    if total_steps < 1:
        raise ValueError("lr_schedule: total_steps must be >= 1")
    if step >= total_steps:
        return 0.0
    step = max(step, 0)
    warm = warmup_ratio * total_steps
    if step < warm:
        return base_lr * (step / warm)
    return base_lr * ((total_steps - step) / (total_steps - warm))


@dataclass
class StepTensors:
    parts: dict
    total: Tensor


def compute_losses(b: Backbone, batch: Batch, cfg: TrainConfig) -> StepTensors:
    """Forward pass of one training step: the four loss terms and their total."""
    w = cfg.weights
    queries = [ex.query for ex in batch.examples]
    latent_docs = cfg.doc_mode == "latent" and not cfg.disable_latent_view
    if latent_docs:
        D = encode_latent_batch(b, batch.docs, cfg.K_train, cfg.soft_temperature, instruct=False).v
    else:
        D = encode_plain_batch(b, batch.docs, instruct=False)
    cands = CandidateSet(D, batch.positive_index)

    parts: dict = {}
    lat = None
    if cfg.disable_latent_view:
        q_vec = encode_plain_batch(b, queries, budget=cfg.max_query_len)
    else:
        for i, q in enumerate(queries):
            if 1 + len(q) > cfg.max_query_len:
                raise ValueError(f"query {i} exceeds max_query_len {cfg.max_query_len}")
        lat = encode_latent_batch(b, queries, cfg.K_train, cfg.soft_temperature)
        q_vec = lat.v
    parts["cl_latent"] = info_nce(q_vec, cands, w.tau)

    need_explicit = not cfg.disable_explicit_view and (
        w.lambda1 > 0
        or (lat is not None and not cfg.disable_kd_out and w.lambda2 > 0)
        or (lat is not None and not cfg.disable_kd_mid and w.lambda3 > 0))
    if need_explicit:
        exp = encode_explicit_batch(b, queries, [ex.segments for ex in batch.examples],
                                    budget=cfg.max_explicit_len)
        parts["cl_explicit"] = info_nce(exp.v_star, cands, w.tau)
        if lat is not None and not cfg.disable_kd_out:
            parts["kd_out"] = kd_output(exp.v_star, lat.v, cands, w.tau_kd, cfg.detach_teacher)
        if lat is not None and not cfg.disable_kd_mid:
            parts["kd_mid"] = kd_trajectory(exp.segment_states, lat.trajectory, cands, w.tau_kd,
                                            K=lat.K, teacher_counts=exp.counts,
                                            detach_teacher=cfg.detach_teacher)
    for name, t in parts.items():
        if not np.isfinite(t.data).all():
            raise NonFiniteLoss(f"loss term {name} is not finite")
    return StepTensors(parts, total_loss(parts, w))


def train_step(b: Backbone, batch: Batch, cfg: TrainConfig, opt: OptimizerState,
               lr_t: float) -> LossReport:
    params = b.parameters()
    ad.zero_grad(params)
    try:
        st = compute_losses(b, batch, cfg)
    except (NonFiniteLoss, FloatingPointError) as e:
        log.error("step %d aborted: %s", opt.step + 1, e)
        raise NonFiniteLoss(str(e)) from None
    ad.backward(st.total)
    grads = [p.grad for p in params]
    bad = [n for (n, _), g in zip(b.named_parameters(), grads) if not np.isfinite(g).all()]
    if bad:
        log.error("step %d aborted: non-finite gradient in %s", opt.step + 1, bad[0])
        ad.zero_grad(params)
        raise NonFiniteLoss(f"non-finite gradient in {bad[0]}")
    adamw_step(params, grads, opt, lr_t)
    ad.zero_grad(params)
    return report(st.parts, st.total)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def batch_schedule(n_examples: int, cfg: TrainConfig) -> list[list[int]]:
    """Index lists of every step: one seeded shuffle per epoch, full batches only."""
    out = []
    per_epoch = n_examples // cfg.batch_size
    if per_epoch < 1:
        raise ValueError(f"{n_examples} examples cannot fill a batch of {cfg.batch_size}")
    for epoch in range(cfg.epochs):
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(n_examples)
        out.extend(perm[i * cfg.batch_size:(i + 1) * cfg.batch_size].tolist()
                   for i in range(per_epoch))
    if cfg.max_steps is not None:
        out = out[:cfg.max_steps]
    return out


class Trainer:
    def __init__(self, backbone: Backbone, examples: Sequence[TrainingExample], cfg: TrainConfig):
        cfg.validate()
        self.backbone = backbone
        self.examples = list(examples)
        self.cfg = cfg
        self.schedule = batch_schedule(len(self.examples), cfg)
        self.opt = OptimizerState.for_params(backbone.parameters(), cfg.betas, cfg.eps,
                                             cfg.weight_decay)
        self.history: list[LossReport] = []

    @property
    def step(self) -> int:
        return self.opt.step

    @property
    def total_steps(self) -> int:
        return len(self.schedule)

    def batch_at(self, step: int) -> Batch:
        rng = np.random.default_rng([self.cfg.seed, 1 << 20, step])
        return make_batch(self.examples, self.schedule[step], self.cfg.hard_negs_per_query, rng)

    def run(self, until: int | None = None, callback: Callable[[int, LossReport], None] | None = None
            ) -> list[LossReport]:
        until = self.total_steps if until is None else min(until, self.total_steps)
        out = []
        while self.step < until:
            s = self.step
            lr_t = lr_schedule(s + 1, self.total_steps, self.cfg.warmup_ratio, self.cfg.lr)
            rep = train_step(self.backbone, self.batch_at(s), self.cfg, self.opt, lr_t)
            self.history.append(rep)
            out.append(rep)
            if callback is not None:
                callback(self.step, rep)
        return out

    def checkpoint(self) -> Checkpoint:
        tensors = {n: t.data for n, t in self.backbone.named_parameters()}
        for (n, _), m, v in zip(self.backbone.named_parameters(), self.opt.m, self.opt.v):
            tensors[f"opt.m.{n}"] = m
            tensors[f"opt.v.{n}"] = v
        return Checkpoint(self.backbone.config, tensors, self.cfg.to_dict(), self.opt.step,
                          {"batch_seed": self.cfg.seed})

    @classmethod
    def resume(cls, ckpt: Checkpoint, examples: Sequence[TrainingExample],
               cfg: TrainConfig | None = None) -> Trainer:
        cfg = TrainConfig.from_dict(ckpt.train_config) if cfg is None else cfg
        b = ckpt.backbone()
        t = cls(b, examples, cfg)
        names = [n for n, _ in b.named_parameters()]
        t.opt.m = [ckpt.tensors[f"opt.m.{n}"].copy() for n in names]
        t.opt.v = [ckpt.tensors[f"opt.v.{n}"].copy() for n in names]
        t.opt.step = ckpt.step
        return t


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"LSERCKPT"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config: BackboneConfig
    tensors: dict[str, np.ndarray]
    train_config: dict
    step: int
    rng_state: dict

    def backbone(self) -> Backbone:
        params = {n: Tensor(self.tensors[n].astype(np.float32), requires_grad=True)
                  for n in expected_shapes(self.config)}
        return from_named(self.config, params)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = json.dumps({"backbone": ckpt.config.to_dict(), "train": ckpt.train_config,
                       "step": ckpt.step, "rng": ckpt.rng_state}, sort_keys=True).encode()
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<I", CKPT_VERSION)
    out += struct.pack("<I", len(meta)) + meta
    for name, arr in ckpt.tensors.items():
        raw = name.encode()
        arr = np.asarray(arr)
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    with open(path, "wb") as f:
        f.write(bytes(out))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 20 or raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise ValueError(f"{path}: checksum mismatch, file is corrupted")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<I", raw, 12)
    meta = json.loads(raw[16:16 + mlen])
    cfg = BackboneConfig(**meta["backbone"])
    shapes = expected_shapes(cfg)
    pos = 16 + mlen
    end = len(raw) - 4
    tensors = {}
    while pos < end:
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        count = int(np.prod(dims))
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * count
        base = name.split("opt.m.", 1)[-1].split("opt.v.", 1)[-1]
        if base in shapes and tuple(dims) != shapes[base]:
            raise ValueError(f"{path}: tensor {name} has shape {tuple(dims)}, config expects {shapes[base]}")
    missing = [n for n in shapes if n not in tensors]
    if missing:
        raise ValueError(f"{path}: missing tensor {missing[0]}")
    return Checkpoint(cfg, tensors, meta["train"], meta["step"], meta["rng"])


def save_backbone(path, b: Backbone, train_config: dict | None = None, step: int = 0) -> None:
    save_checkpoint(path, Checkpoint(b.config, {n: t.data for n, t in b.named_parameters()},
                                     train_config or {}, step, {}))


def micro_audit(seed: int = 0, step: float = 1e-5) -> float:
    """Finite-difference audit of the full four-term objective on a micro config
    (m=8, one layer, N=2, K=2, M=3) at 64-bit. Returns the max relative error.

    The teacher is left attached here: finite differences perturb the explicit
    view as well, so only the undetached objective is comparable.
    """
    from .backbone import init_backbone
    from .data import GenConfig, gen_multihop

    bb = BackboneConfig(vocab_size=20, model_dim=8, n_layers=1, n_heads=2, max_seq_len=16,
                        seed=seed, init_std=0.3)
    gen = GenConfig(vocab_size=20, n_keys=10, hops=3, n_examples=4, n_eval=2, corpus_size=12,
                    query_noise=1, doc_noise=1, seed=seed, eval_fraction=0.2)
    task = gen_multihop(gen)
    batch = make_batch(task.train.examples, [0, 1], 1)
    b = init_backbone(bb, dtype=np.float64)
    cfg = TrainConfig(K_train=2, weights=LossWeights(tau=0.5, tau_kd=0.5), detach_teacher=False)
    parts = compute_losses(b, batch, cfg).parts
    if set(parts) != {"cl_latent", "cl_explicit", "kd_out", "kd_mid"}:
        raise RuntimeError(f"micro audit: expected all four terms, got {sorted(parts)}")
    return ad.grad_check(lambda: compute_losses(b, batch, cfg).total, b.parameters(), step=step)
