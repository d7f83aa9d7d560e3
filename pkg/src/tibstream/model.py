"""Chunk-masked self-attention encoder, causal attention decoder and losses.

The encoder stacks ``subsample`` consecutive feature frames, projects them
to the model dimension, adds sinusoidal positions and runs pre-norm
self-attention blocks under a caller-supplied boolean mask. The decoder is
a pre-norm Transformer decoder with a causal self-attention mask and
cross-attention over all encoder states.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .chunking import Bounds, ChunkPlan, ControllerParams, build_attention_mask
from .ctc import ctc_loss_batch
from .numerics import (
    ShapeError,
    Tensor,
    add,
    cross_entropy,
    dropout,
    embedding,
    layer_norm,
    log_softmax,
    masked_softmax,
    matmul,
    no_grad,
    relu,
    reshape,
    scale,
    sum_,
    transpose,
)
from .tibetan import EOS, SOS


@dataclass
class EncoderConfig:
    input_dim: int = 20
    layers: int = 2
    d: int = 64
    heads: int = 4
    ffn: int = 128
    dropout: float = 0.1
    subsample: int = 2
    positional: bool = True

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"model dim {self.d} not divisible by {self.heads} heads")


@dataclass
class DecoderConfig:
    layers: int = 2
    d: int = 64
    heads: int = 4
    ffn: int = 128
    dropout: float = 0.1
    causal: bool = field(default=True, init=False)


class Stage(enum.Enum):
    GLOBAL = "global"
    STATIC = "static"
    DYNAMIC = "dynamic"


@dataclass
class TrainConfig:
    stage: Stage = Stage.GLOBAL
    ctc_weight: float = 0.5
    latency_weight: float = 0.0
    static_width: int = 16
    static_stride: int = 16
    carry_over: int = 8
    bounds: Bounds = field(default_factory=Bounds)
    context_decay: float = 0.9
    epochs: int = 10
    batch_size: int = 25
    lr: float = 0.002
    clip: float = 5.0
    seed: int = 0
    max_position_offset: int = 1000

    def __post_init__(self):
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError(f"ctc_weight must lie in [0, 1], got {self.ctc_weight}")
        if self.latency_weight < 0:
            raise ValueError("latency_weight must be non-negative")
        if isinstance(self.stage, str):
            self.stage = Stage(self.stage)


def sinusoidal(positions: np.ndarray, d: int) -> np.ndarray:
    """Sinusoidal encodings for an integer array of positions, shape ``positions.shape + (d,)``."""
    i = np.arange(d // 2)
    freq = np.exp(-math.log(10000.0) * 2 * i / d)
    ang = positions[..., None] * freq
    out = np.zeros(positions.shape + (d,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def joint_loss(ctc_nll, attn_nll, lam: float):
    """``lam * ctc + (1 - lam) * attention``; accepts floats or tensors."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if isinstance(ctc_nll, Tensor) or isinstance(attn_nll, Tensor):
        return add(scale(_t(ctc_nll), lam), scale(_t(attn_nll), 1.0 - lam))
    return lam * ctc_nll + (1.0 - lam) * attn_nll


def dynamic_loss(total, apl_value, latency_weight: float):
    """Joint loss plus a weighted latency penalty."""
    if latency_weight < 0:
        raise ValueError("latency_weight must be non-negative")
    if isinstance(total, Tensor) or isinstance(apl_value, Tensor):
        return add(_t(total), scale(_t(apl_value), latency_weight))
    return total + latency_weight * apl_value


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class ASRModel:
    """Hybrid CTC/attention model with a dynamic chunk controller.

    All weights live in ``self.params`` keyed by dotted names, which is
    also the checkpoint layout.
    """

    def __init__(self, vocab_size: int, enc: EncoderConfig | None = None,
                 dec: DecoderConfig | None = None, bounds: Bounds | None = None,
                 controller_hidden: int = 16, seed: int = 0):
        self.vocab_size = vocab_size
        self.enc = enc or EncoderConfig()
        self.dec = dec or DecoderConfig(d=self.enc.d, heads=self.enc.heads, ffn=self.enc.ffn,
                                        dropout=self.enc.dropout)
        if self.dec.d != self.enc.d:
            raise ValueError("encoder and decoder dims must match")
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        e, d = self.enc, self.enc.d
        self._linear("enc.in", e.input_dim * e.subsample, d, rng)
        for l in range(e.layers):
            self._block(f"enc.{l}", d, e.ffn, rng, cross=False)
        self._norm("enc.out", d)
        self._linear("ctc", d, vocab_size, rng)
        self.params["dec.embed"] = Tensor(rng.normal(0, 1.0 / math.sqrt(d), (vocab_size, d)), True)
        for l in range(self.dec.layers):
            self._block(f"dec.{l}", d, self.dec.ffn, rng, cross=True)
        self._norm("dec.out", d)
        self._linear("dec.proj", d, vocab_size, rng)
        self.controller = ControllerParams(d, controller_hidden, bounds, rng)
        self.params.update(self.controller.parameters())

    # ------------------------------------------------------------- init

    def _linear(self, name, n_in, n_out, rng):
        self.params[f"{name}.w"] = Tensor(rng.normal(0, 1.0 / math.sqrt(n_in), (n_in, n_out)), True)
        self.params[f"{name}.b"] = Tensor(np.zeros(n_out), True)

    def _norm(self, name, d):
        self.params[f"{name}.g"] = Tensor(np.ones(d), True)
        self.params[f"{name}.b"] = Tensor(np.zeros(d), True)

    def _block(self, name, d, ffn, rng, cross):
        attns = ("self", "cross") if cross else ("self",)
        for a in attns:
            self._norm(f"{name}.{a}.ln", d)
            for proj in "qkvo":
                self._linear(f"{name}.{a}.{proj}", d, d, rng)
        self._norm(f"{name}.ff.ln", d)
        self._linear(f"{name}.ff.1", d, ffn, rng)
        self._linear(f"{name}.ff.2", ffn, d, rng)

    # ---------------------------------------------------------- helpers

    def lin(self, x: Tensor, name: str) -> Tensor:
        return add(matmul(x, self.params[f"{name}.w"]), self.params[f"{name}.b"])

    def ln(self, x: Tensor, name: str) -> Tensor:
        return layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def attention(self, xq: Tensor, xk: Tensor, mask: np.ndarray, name: str, heads: int) -> Tensor:
        """Multi-head attention; ``mask`` is ``B x Tq x Tk`` booleans."""
        B, Tq, d = xq.shape
        Tk = xk.shape[1]
        if mask.shape != (B, Tq, Tk):
            raise ShapeError("attention", mask.shape, (B, Tq, Tk))
        dk = d // heads

        def split(x, T):
            return transpose(reshape(x, (B, T, heads, dk)), (0, 2, 1, 3))

        q = split(self.lin(xq, f"{name}.q"), Tq)
        k = split(self.lin(xk, f"{name}.k"), Tk)
        v = split(self.lin(xk, f"{name}.v"), Tk)
        scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
        w = masked_softmax(scores, np.broadcast_to(mask[:, None], scores.shape))
        ctx = reshape(transpose(matmul(w, v), (0, 2, 1, 3)), (B, Tq, d))
        return self.lin(ctx, f"{name}.o")

    def _drop(self, x, rng):
        return dropout(x, self.enc.dropout, rng)

    def feed_forward(self, x: Tensor, name: str) -> Tensor:
        return self.lin(relu(self.lin(x, f"{name}.1")), f"{name}.2")

    def encoder_layer(self, xq: Tensor, xk: Tensor, mask: np.ndarray, l: int, rng=None) -> Tensor:
        """One pre-norm block; queries ``xq`` attend to keys ``xk`` (the same tensor in full mode)."""
        name = f"enc.{l}"
        nq = self.ln(xq, f"{name}.self.ln")
        nk = nq if xk is xq else self.ln(xk, f"{name}.self.ln")
        x = add(xq, self._drop(self.attention(nq, nk, mask, f"{name}.self", self.enc.heads), rng))
        return add(x, self._drop(self.feed_forward(self.ln(x, f"{name}.ff.ln"), f"{name}.ff"), rng))

    # ---------------------------------------------------------- encoder

    def stack_frames(self, feats: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        """Pad and frame-stack raw features to ``B x T' x (s*D)`` plus encoder lengths."""
        s, D = self.enc.subsample, self.enc.input_dim
        for f in feats:
            if f.ndim != 2 or f.shape[1] != D:
                raise ShapeError("encode", f.shape, (None, D))
        lens = np.array([-(-len(f) // s) for f in feats])
        out = np.zeros((len(feats), int(lens.max()) * s, D))
        for b, f in enumerate(feats):
            out[b, :len(f)] = f
        return out.reshape(len(feats), -1, s * D), lens

    def embed_input(self, stacked: np.ndarray, offsets=None) -> Tensor:
        B, T, _ = stacked.shape
        x = self.lin(Tensor(stacked), "enc.in")
        if not self.enc.positional:
            return x
        pos = np.arange(T)[None, :] + (np.zeros((B, 1)) if offsets is None else np.asarray(offsets)[:, None])
        return add(x, Tensor(sinusoidal(pos, self.enc.d)))

    def encode(self, feats: Sequence[np.ndarray], masks: Sequence[np.ndarray] | None = None,
               rng=None, offsets=None) -> tuple[Tensor, np.ndarray]:
        """Encoder states ``B x T' x d`` and lengths.

        ``masks[b]`` is the ``T'_b x T'_b`` attention mask of utterance b;
        ``None`` means full attention. Padding is never attended to.
        """
        stacked, lens = self.stack_frames(feats)
        B, T = stacked.shape[:2]
        full = np.zeros((B, T, T), dtype=bool)
        for b, n in enumerate(lens):
            if masks is None or masks[b] is None:
                full[b, :n, :n] = True
            else:
                m = np.asarray(masks[b], dtype=bool)
                if m.shape != (n, n):
                    raise ShapeError("encode", m.shape, (n, n), detail="mask/length mismatch")
                full[b, :n, :n] = m
        x = self._drop(self.embed_input(stacked, offsets), rng)
        for l in range(self.enc.layers):
            x = self.encoder_layer(x, x, full, l, rng)
        return self.ln(x, "enc.out"), lens

    def encode_one(self, feat: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        with no_grad():
            states, _ = self.encode([feat], None if mask is None else [mask])
        return states.data[0]

    def encode_prefix_fn(self, feat: np.ndarray):
        """Encoder callback for :func:`dynamic_plan`: encodes the leading frames under a mask."""
        s = self.enc.subsample

        def fn(mask: np.ndarray) -> np.ndarray:
            n = mask.shape[0]
            return self.encode_one(feat[: n * s], mask)[:n]
        return fn

    def encode_prefix_batch_fn(self, feats: Sequence[np.ndarray]):
        """Batched callback for :func:`dynamic_plans` over ``feats``."""
        s = self.enc.subsample

        def fn(indices: list[int], masks: list[np.ndarray]) -> list[np.ndarray]:
            prefixes = [feats[i][: m.shape[0] * s] for i, m in zip(indices, masks)]
            with no_grad():
                states, lens = self.encode(prefixes, masks)
            return [states.data[b, :n] for b, n in enumerate(lens)]
        return fn

    def chunk_summaries(self, states: np.ndarray, plan: ChunkPlan) -> list[np.ndarray]:
        return [states[lo:hi].mean(axis=0) for lo, hi in (plan.stride_region(n) for n in range(len(plan)))]

    def encode_incremental(self, feat: np.ndarray, plan: ChunkPlan, carry_over: int) -> np.ndarray:
        """Chunk-by-chunk encoding with per-layer caches of already computed frames.

        Produces the same states as :meth:`encode` under the plan's mask.
        Each chunk computes only the frames its owned outputs depend on that
        are not cached yet; cached frames are reused as left context.
        """
        mask = build_attention_mask(plan, carry_over)
        T = plan.T
        L = self.enc.layers
        with no_grad():
            stacked, lens = self.stack_frames([feat])
            if lens[0] != T:
                raise ShapeError("encode_incremental", (lens[0],), (T,))
            base = self.embed_input(stacked).data[0]
            cache = [dict() for _ in range(L + 1)]
            for n in range(len(plan)):
                lo, hi = plan.stride_region(n)
                need = [set() for _ in range(L + 1)]
                need[L] = set(range(lo, hi)) - set(cache[L])
                for l in range(L, 0, -1):
                    for i in need[l]:
                        need[l - 1].update(np.flatnonzero(mask[i]).tolist())
                    need[l - 1] -= set(cache[l - 1])
                for i in need[0]:
                    cache[0][i] = base[i]
                for l in range(1, L + 1):
                    q = sorted(need[l])
                    if not q:
                        continue
                    keys = sorted(set(np.flatnonzero(mask[q].any(axis=0)).tolist()))
                    xq = Tensor(np.stack([cache[l - 1][i] for i in q])[None])
                    xk = Tensor(np.stack([cache[l - 1][j] for j in keys])[None])
                    sub = mask[np.ix_(q, keys)][None]
                    out = self.encoder_layer(xq, xk, sub, l - 1).data[0]
                    for i, row in zip(q, out):
                        cache[l][i] = row
            top = np.stack([cache[L][i] for i in range(T)])[None]
            return self.ln(Tensor(top), "enc.out").data[0]

    def ctc_log_probs(self, states: Tensor) -> Tensor:
        return log_softmax(self.lin(states, "ctc"))

    # ---------------------------------------------------------- decoder

    def decode_forward(self, states: Tensor, state_lens: Sequence[int],
                       ys_in: Sequence[Sequence[int]], rng=None) -> Tensor:
        """Teacher-forced log-probabilities ``B x U x V``.

        Each ``ys_in[b]`` must start with sos; position t sees only
        ``ys_in[b][:t+1]`` and the encoder states.
        """
        B = len(ys_in)
        if any(len(y) == 0 for y in ys_in):
            raise ValueError("decoder input must be non-empty")
        if any(y[0] != SOS for y in ys_in):
            raise ValueError("decoder input must start with sos")
        U = max(len(y) for y in ys_in)
        ids = np.full((B, U), EOS, dtype=np.int64)
        for b, y in enumerate(ys_in):
            ids[b, :len(y)] = y
        d = self.dec.d
        x = scale(embedding(self.params["dec.embed"], ids), math.sqrt(d))
        x = add(x, Tensor(sinusoidal(np.broadcast_to(np.arange(U), (B, U)), d)))
        x = dropout(x, self.dec.dropout, rng)
        causal = np.tril(np.ones((U, U), dtype=bool))
        self_mask = np.broadcast_to(causal, (B, U, U))
        Tk = states.shape[1]
        cross_mask = np.broadcast_to((np.arange(Tk)[None, :] < np.asarray(state_lens)[:, None])[:, None, :],
                                     (B, U, Tk))
        drop = lambda t: dropout(t, self.dec.dropout, rng)  # noqa: E731
        for l in range(self.dec.layers):
            name = f"dec.{l}"
            h = self.ln(x, f"{name}.self.ln")
            x = add(x, drop(self.attention(h, h, self_mask, f"{name}.self", self.dec.heads)))
            h = self.ln(x, f"{name}.cross.ln")
            x = add(x, drop(self.attention(h, states, cross_mask, f"{name}.cross", self.dec.heads)))
            x = add(x, drop(self.feed_forward(self.ln(x, f"{name}.ff.ln"), f"{name}.ff")))
        return log_softmax(self.lin(self.ln(x, "dec.out"), "dec.proj"))

    # ------------------------------------------------------------ losses

    def losses(self, feats, targets, masks=None, ctc_weight: float = 0.5, rng=None, offsets=None):
        """Batch-mean CTC and attention NLLs and their joint combination."""
        states, lens = self.encode(feats, masks, rng, offsets)
        B = len(feats)
        ctc = scale(sum_(ctc_loss_batch(self.ctc_log_probs(states), lens, targets)), 1.0 / B)
        ys_in = [[SOS] + list(t) for t in targets]
        ys_out = [list(t) + [EOS] for t in targets]
        U = max(len(y) for y in ys_out)
        tgt = np.full((B, U), EOS, dtype=np.int64)
        w = np.zeros((B, U))
        for b, y in enumerate(ys_out):
            tgt[b, :len(y)] = y
            w[b, :len(y)] = 1.0
        logp = self.decode_forward(states, lens, ys_in, rng)
        attn = scale(cross_entropy(logp, tgt, w), 1.0 / B)
        return {"ctc": ctc, "attn": attn, "total": joint_loss(ctc, attn, ctc_weight),
                "states": states, "lens": lens}

    def sequence_logprob(self, states: Tensor, state_len: int, candidates: Sequence[Sequence[int]]) -> np.ndarray:
        """Teacher-forced log P(ids + eos) for each candidate under one utterance's states."""
        if not candidates:
            return np.zeros(0)
        with no_grad():
            B = len(candidates)
            st = Tensor(np.broadcast_to(states.data, (B,) + states.shape[1:]).copy())
            logp = self.decode_forward(st, [state_len] * B, [[SOS] + list(c) for c in candidates]).data
        out = np.zeros(B)
        for b, c in enumerate(candidates):
            seq = list(c) + [EOS]
            out[b] = logp[b, np.arange(len(seq)), seq].sum()
        return out

    # ------------------------------------------------------- parameters

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ShapeError("load_state_dict", state[k].shape, p.shape, detail=k)
            p.data[...] = state[k]

    def copy(self) -> "ASRModel":
        other = ASRModel.__new__(ASRModel)
        other.vocab_size, other.enc, other.dec = self.vocab_size, self.enc, self.dec
        other.params = {k: Tensor(v.data.copy(), True) for k, v in self.params.items()}
        other.controller = ControllerParams.__new__(ControllerParams)
        other.controller.d, other.controller.k = self.controller.d, self.controller.k
        other.controller.bounds = self.controller.bounds
        for n in ControllerParams.names:
            setattr(other.controller, n, other.params[f"ctrl.{n}"])
        return other
