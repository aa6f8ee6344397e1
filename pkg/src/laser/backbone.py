"""Tiny pre-norm causal transformer shared by every encoding pathway.

Several sequences can be processed in one call: their rows are stacked and
each row carries a sequence id and a position. Attention is restricted to
keys of the same sequence at an earlier or equal position, so a batch of
sequences behaves exactly like independent passes. The cache keeps the
keys and values as graph tensors so gradients flow through cached steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD, EOS, INSTR, SEG = 0, 1, 2, 3
N_SPECIAL = 4


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 512
    model_dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    mlp_mult: int = 4
    max_seq_len: int = 128
    tie_lm_head: bool = True
    seed: int = 0
    init_std: float = 0.02

    def validate(self) -> None:
        if self.vocab_size < N_SPECIAL:
            raise ValueError(f"vocab_size must be >= {N_SPECIAL} (PAD, EOS, INSTR, SEG), got {self.vocab_size}")
        if self.model_dim < 1 or self.n_heads < 1:
            raise ValueError("model_dim and n_heads must be positive")
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.mlp_mult < 1:
            raise ValueError("mlp_mult must be >= 1")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")
        if not self.init_std > 0:
            raise ValueError("init_std must be positive")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def param_count(cfg: BackboneConfig) -> int:
    m, V, h = cfg.model_dim, cfg.vocab_size, cfg.mlp_mult * cfg.model_dim
    per_layer = 2 * m + 4 * m * m + 2 * m * h
    total = V * m + cfg.max_seq_len * m + cfg.n_layers * per_layer + m
    if not cfg.tie_lm_head:
        total += m * V
    return total


@dataclass
class Block:
    norm1: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    norm2: Tensor
    w_up: Tensor
    w_down: Tensor

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.{k}", getattr(self, k)) for k in
                ("norm1", "wq", "wk", "wv", "wo", "norm2", "w_up", "w_down")]


@dataclass
class Backbone:
    config: BackboneConfig
    E: Tensor
    pos: Tensor
    blocks: list[Block]
    final_norm: Tensor
    W_head: Tensor | None = None  # only when the head is untied

    @property
    def dtype(self):
        return self.E.dtype

    @property
    def W_lm(self) -> Tensor:
        return ad.transpose(self.E) if self.W_head is None else self.W_head

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("E", self.E), ("pos", self.pos)]
        for i, b in enumerate(self.blocks):
            out.extend(b.named(f"blocks.{i}"))
        out.append(("final_norm", self.final_norm))
        if self.W_head is not None:
            out.append(("W_lm", self.W_head))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def astype(self, dtype) -> Backbone:
        """Copy with every parameter cast to ``dtype``."""
        params = {n: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
                  for n, t in self.named_parameters()}
        return from_named(self.config, params)

    def zero_grad(self) -> None:
        ad.zero_grad(self.parameters())


def from_named(cfg: BackboneConfig, params: dict[str, Tensor]) -> Backbone:
    blocks = []
    for i in range(cfg.n_layers):
        blocks.append(Block(**{k: params[f"blocks.{i}.{k}"] for k in
                               ("norm1", "wq", "wk", "wv", "wo", "norm2", "w_up", "w_down")}))
    return Backbone(cfg, params["E"], params["pos"], blocks, params["final_norm"],
                    params.get("W_lm"))


def expected_shapes(cfg: BackboneConfig) -> dict[str, tuple[int, int]]:
    m, h = cfg.model_dim, cfg.mlp_mult * cfg.model_dim
    shapes = {"E": (cfg.vocab_size, m), "pos": (cfg.max_seq_len, m)}
    for i in range(cfg.n_layers):
        p = f"blocks.{i}"
        shapes.update({f"{p}.norm1": (1, m), f"{p}.wq": (m, m), f"{p}.wk": (m, m),
                       f"{p}.wv": (m, m), f"{p}.wo": (m, m), f"{p}.norm2": (1, m),
                       f"{p}.w_up": (m, h), f"{p}.w_down": (h, m)})
    shapes["final_norm"] = (1, m)
    if not cfg.tie_lm_head:
        shapes["W_lm"] = (m, cfg.vocab_size)
    return shapes


def init_backbone(config: BackboneConfig, dtype=np.float32) -> Backbone:
    """Normal init with std ``config.init_std``; residual output projections are
    further scaled by 1/sqrt(2 * n_layers). Norm gains start at one."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    m, h = config.model_dim, config.mlp_mult * config.model_dim
    std = config.init_std
    resid = std / math.sqrt(2 * max(config.n_layers, 1))

    def normal(shape, std):
        return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)

    def ones():
        return Tensor(np.ones((1, m), dtype=dtype), requires_grad=True)

    E = normal((config.vocab_size, m), std)
    pos = normal((config.max_seq_len, m), std)
    blocks = []
    for _ in range(config.n_layers):
        blocks.append(Block(norm1=ones(), wq=normal((m, m), std), wk=normal((m, m), std),
                            wv=normal((m, m), std), wo=normal((m, m), resid), norm2=ones(),
                            w_up=normal((m, h), std), w_down=normal((h, m), resid)))
    final_norm = ones()
    head = None if config.tie_lm_head else normal((m, config.vocab_size), std)
    return Backbone(config, E, pos, blocks, final_norm, head)


@dataclass
class AttnCache:
    """Per-layer keys/values of every position processed so far.

    Rows of all cached sequences are stacked; ``seq`` and ``pos`` label them.
    ``lengths`` holds the number of cached positions per sequence.
    """
    keys: list[Tensor | None] = field(default_factory=list)
    values: list[Tensor | None] = field(default_factory=list)
    seq: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pos: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    lengths: dict[int, int] = field(default_factory=dict)

    @property
    def cached_len(self) -> int:
        """Cached positions of sequence 0 (the single-sequence case)."""
        return self.lengths.get(0, 0)

    def length(self, seq_id: int) -> int:
        return self.lengths.get(seq_id, 0)


def embed_tokens(b: Backbone, ids) -> Tensor:
    ids = np.asarray(list(ids), dtype=np.int64)
    V = b.config.vocab_size
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        bad = ids[(ids < 0) | (ids >= V)]
        raise ValueError(f"token id(s) {bad.tolist()} out of range for vocab {V}")
    if ids.size == 0:
        return Tensor(np.zeros((0, b.config.model_dim), dtype=b.dtype))
    return ad.take_rows(b.E, ids)


def add_positions(b: Backbone, x: Tensor, positions) -> Tensor:
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size and positions.max() >= b.config.max_seq_len:
        raise ValueError(f"position {int(positions.max())} exceeds max_seq_len {b.config.max_seq_len}")
    return ad.add(x, ad.take_rows(b.pos, positions))


def forward(b: Backbone, x: Tensor, cache: AttnCache | None = None, seq_ids=None,
            positions=None, add_pos: bool = True) -> tuple[Tensor, AttnCache]:
    """Run the causal stack over rows of ``x``.

    Single-sequence use needs only ``x`` (and optionally a cache). For stacked
    sequences pass ``seq_ids`` per row; positions default to continuing each
    sequence from its cached length in row order. Returns post-final-norm
    hidden states and the extended cache.
    """
    L = x.shape[0]
    m = b.config.model_dim
    if x.shape[1] != m:
        raise ValueError(f"forward: input width {x.shape[1]} != model_dim {m}")
    cache = cache if cache is not None else AttnCache()
    seq_ids = np.zeros(L, dtype=np.int64) if seq_ids is None else np.asarray(seq_ids, dtype=np.int64)
    if seq_ids.shape != (L,):
        raise ValueError("forward: seq_ids must have one entry per row")
    lengths = dict(cache.lengths)
    if positions is None:
        positions = np.empty(L, dtype=np.int64)
        for i, s in enumerate(seq_ids.tolist()):
            positions[i] = lengths.get(s, 0)
            lengths[s] = positions[i] + 1
    else:
        positions = np.asarray(positions, dtype=np.int64)
        for s, p in zip(seq_ids.tolist(), positions.tolist()):
            lengths[s] = max(lengths.get(s, 0), p + 1)
    over = [s for s, n in lengths.items() if n > b.config.max_seq_len]
    if over:
        raise ValueError(f"forward: sequence {over[0]} length {lengths[over[0]]} exceeds "
                         f"max_seq_len {b.config.max_seq_len}")
    if L == 0:
        return Tensor(np.zeros((0, m), dtype=b.dtype)), cache

    if add_pos:
        x = add_positions(b, x, positions)

    k_seq = np.concatenate([cache.seq, seq_ids])
    k_pos = np.concatenate([cache.pos, positions])
    allowed = (seq_ids[:, None] == k_seq[None, :]) & (k_pos[None, :] <= positions[:, None])

    new_keys, new_values = [], []
    h = x
    for li, blk in enumerate(b.blocks):
        a_in = ad.rms_norm(h, blk.norm1)
        q = a_in @ blk.wq
        k = a_in @ blk.wk
        v = a_in @ blk.wv
        prev_k = cache.keys[li] if li < len(cache.keys) else None
        prev_v = cache.values[li] if li < len(cache.values) else None
        k_all = k if prev_k is None else ad.concat_rows([prev_k, k])
        v_all = v if prev_v is None else ad.concat_rows([prev_v, v])
        new_keys.append(k_all)
        new_values.append(v_all)
        att = ad.causal_attention(q, k_all, v_all, b.config.n_heads, allowed)
        h = h + att @ blk.wo
        m_in = ad.rms_norm(h, blk.norm2)
        h = h + ad.gelu(m_in @ blk.w_up) @ blk.w_down
    hidden = ad.rms_norm(h, b.final_norm)
    new_cache = AttnCache(new_keys, new_values, k_seq, k_pos, lengths)
    return hidden, new_cache


def lm_logits(b: Backbone, h: Tensor) -> Tensor:
    if h.shape[1] != b.config.model_dim:
        raise ValueError(f"lm_logits: width {h.shape[1]} != model_dim {b.config.model_dim}")
    return h @ b.W_lm
