"""Chunk planning, chunk attention masks and latency accounting.

Frames here are encoder frames (after subsampling) unless a name says
``raw``. A plan is a list of chunks ``(start, width, stride)`` whose stride
regions ``[start, start + stride)`` tile ``[0, T)``; each frame is owned by
the chunk whose stride region contains it and may look at its chunk's full
window plus ``carry_over`` frames of left context.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numerics import (
    NumericError,
    Tensor,
    add,
    concat,
    expand,
    matmul,
    mean,
    mul,
    no_grad,
    scale,
    sigmoid,
    tanh,
    transpose,
)


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class Chunk:
    start: int
    width: int
    stride: int

    @property
    def end(self) -> int:
        return self.start + self.width


@dataclass
class ChunkPlan:
    chunks: list[Chunk]
    T: int
    # per-chunk controller diagnostics (empty for static plans)
    diagnostics: list[dict] = field(default_factory=list)

    def __post_init__(self):
        prev = -1
        for c in self.chunks:
            if c.start <= prev:
                raise PlanError(f"chunk starts must increase strictly: {self.chunks}")
            prev = c.start

    def __len__(self) -> int:
        return len(self.chunks)

    def __iter__(self):
        return iter(self.chunks)

    def owners(self) -> np.ndarray:
        """Index of the owning chunk for every frame in ``[0, T)``."""
        own = np.full(self.T, -1, dtype=np.int64)
        for n, c in enumerate(self.chunks):
            lo, hi = c.start, min(c.start + c.stride, self.T)
            free = own[lo:hi] == -1
            own[lo:hi][free] = n
        missing = np.flatnonzero(own < 0)
        if missing.size:
            raise PlanError(f"frame {int(missing[0])} is not covered by any stride region")
        return own

    def stride_region(self, n: int) -> tuple[int, int]:
        c = self.chunks[n]
        return c.start, min(c.start + c.stride, self.T)

    def to_jsonl(self) -> str:
        lines = []
        for n, c in enumerate(self.chunks):
            d = self.diagnostics[n] if n < len(self.diagnostics) else {}
            lines.append(json.dumps({"n": n, "start": c.start, "width": c.width, "stride": c.stride,
                                     "w_hat": d.get("w_hat"), "s_hat": d.get("s_hat"),
                                     "alpha": d.get("alpha")}))
        return "\n".join(lines) + "\n"


def static_plan(T: int, W: int, S: int) -> ChunkPlan:
    if T <= 0:
        raise PlanError(f"T must be positive, got {T}")
    if S <= 0 or S > W:
        raise PlanError(f"stride must satisfy 1 <= S <= W (S={S}, W={W})")
    return ChunkPlan([Chunk(s, min(W, T - s), S) for s in range(0, T, S)], T)


def full_plan(T: int) -> ChunkPlan:
    """Single chunk spanning the utterance (global attention)."""
    return ChunkPlan([Chunk(0, T, T)], T)


def build_attention_mask(plan: ChunkPlan, carry_over: int, T: int | None = None) -> np.ndarray:
    """Boolean ``T x T`` mask; ``mask[i, j]`` is whether frame i may attend to j."""
    if carry_over < 0:
        raise PlanError(f"carry_over must be >= 0, got {carry_over}")
    T = plan.T if T is None else T
    if T != plan.T:
        raise PlanError(f"mask length {T} does not match plan length {plan.T}")
    own = plan.owners()
    starts = np.array([c.start for c in plan.chunks])[own]
    ends = np.array([c.end for c in plan.chunks])[own]
    j = np.arange(T)
    return (j[None, :] >= (starts - carry_over)[:, None]) & (j[None, :] < ends[:, None])


# ------------------------------------------------------------ controller

@dataclass(frozen=True)
class Bounds:
    w_min: int = 8
    w_max: int = 32
    s_min: int = 4
    s_max: int = 16

    def __post_init__(self):
        if not (0 < self.w_min <= self.w_max and 0 < self.s_min <= self.s_max <= self.w_max):
            raise PlanError(f"invalid controller bounds {self}")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


class ControllerParams:
    """Weights of the width/stride gate.

    ``W_p`` projects the 2d-dimensional concatenation ``[h; c]`` back to d so
    the gated sum of the two branches is well typed.
    """

    names = ("W_h", "W_c", "w_alpha", "W_p", "W_1", "b_1", "W_2", "b_2")

    def __init__(self, d: int, k: int = 16, bounds: Bounds | None = None,
                 rng: np.random.Generator | None = None, init_scale: float = 1.0):
        self.d, self.k = d, k
        self.bounds = bounds or Bounds()
        shapes = {"W_h": (d, d), "W_c": (d, d), "w_alpha": (2 * d,), "W_p": (d, 2 * d),
                  "W_1": (k, d), "b_1": (k,), "W_2": (2, k), "b_2": (2,)}
        for name, shape in shapes.items():
            if rng is None or name.startswith("b_"):
                data = np.zeros(shape)
            else:
                data = rng.normal(0.0, init_scale / math.sqrt(shape[-1]), shape)
            setattr(self, name, Tensor(data, requires_grad=True))

    def parameters(self) -> dict[str, Tensor]:
        return {f"ctrl.{n}": getattr(self, n) for n in self.names}


def controller_forward(h: Tensor, c: Tensor, p: ControllerParams):
    """Batched gate over rows of ``h`` and ``c`` (both ``N x d``).

    Returns tensors ``(w_hat, s_hat, alpha, z)`` of shapes N, N, N and N x d.
    """
    if h.shape != c.shape or h.ndim != 2 or h.shape[1] != p.d:
        raise PlanError(f"controller expects N x {p.d} inputs, got {h.shape} and {c.shape}")
    n, d = h.shape
    hc = concat([h, c], axis=1)
    alpha = sigmoid(matmul(hc, p.w_alpha.reshape(2 * d, 1)))              # N x 1
    local = tanh(add(matmul(h, transpose(p.W_h)), matmul(c, transpose(p.W_c))))
    glob = matmul(hc, transpose(p.W_p))
    a = expand(alpha, (n, d))
    z = add(mul(a, local), add(glob, scale(mul(a, glob), -1.0)))
    hidden = tanh(add(matmul(z, transpose(p.W_1)), p.b_1))
    out = sigmoid(add(matmul(hidden, transpose(p.W_2)), p.b_2))            # N x 2
    return out[:, 0], out[:, 1], alpha[:, 0], z


def discretize(w_hat: float, s_hat: float, b: Bounds) -> tuple[int, int]:
    W = round_half_up(b.w_min + (b.w_max - b.w_min) * w_hat)
    S = round_half_up(b.s_min + (b.s_max - b.s_min) * s_hat)
    W = min(max(W, b.w_min), b.w_max)
    S = min(max(S, b.s_min), b.s_max, W)
    return W, S


def controller_step(h_prev, c_prev, p: ControllerParams):
    """Chunk width and stride for the next chunk, plus gate diagnostics."""
    h = np.asarray(h_prev, dtype=np.float64).reshape(1, -1)
    c = np.asarray(c_prev, dtype=np.float64).reshape(1, -1)
    with no_grad():
        w_hat, s_hat, alpha, z = controller_forward(Tensor(h), Tensor(c), p)
    w, s = float(w_hat.data[0]), float(s_hat.data[0])
    if not (np.isfinite(w) and np.isfinite(s)):
        raise NumericError("controller_step")
    W, S = discretize(w, s, p.bounds)
    return W, S, {"alpha": float(alpha.data[0]), "z": z.data[0].copy(), "w_hat": w, "s_hat": s}


def update_context(c_prev, h_n, beta: float = 0.9) -> np.ndarray:
    """Exponential moving average of chunk summaries."""
    return beta * np.asarray(c_prev, dtype=np.float64) + (1.0 - beta) * np.asarray(h_n, dtype=np.float64)


def _provisional_plan(chunks: list[Chunk], t_avail: int) -> ChunkPlan:
    """Committed chunks plus a tail chunk owning frames not yet assigned."""
    chunks = list(chunks)
    last = chunks[-1]
    nxt = last.start + last.stride
    if nxt < t_avail:
        chunks.append(Chunk(nxt, t_avail - nxt, t_avail - nxt))
    return ChunkPlan(chunks, t_avail)


def dynamic_plan(encoder_fn: Callable[[np.ndarray], np.ndarray] | None, T: int,
                 p: ControllerParams, carry_over: int = 0, beta: float = 0.9) -> ChunkPlan:
    """Plan chunks sequentially from encoder summaries.

    ``encoder_fn(mask)`` encodes the first ``mask.shape[0]`` frames under the
    given boolean mask and returns their final-layer states. Before chunk
    n+1 is chosen only frames below chunk n's end exist, so the summary
    ``h_n`` is the mean state over chunk n's stride region computed on that
    prefix. The first chunk sees zero summary and zero context.

    Each entry of ``plan.diagnostics`` keeps the controller inputs
    (``h_in``, ``c_in``) so training can recompute the gate with gradients.
    """
    batch_fn = None
    if encoder_fn is not None:
        batch_fn = lambda idx, masks: [encoder_fn(m) for m in masks]  # noqa: E731
    return dynamic_plans(batch_fn, [T], p, carry_over, beta)[0]


def dynamic_plans(encoder_fn: Callable[[list[int], list[np.ndarray]], list[np.ndarray]] | None,
                  Ts: Sequence[int], p: ControllerParams, carry_over: int = 0,
                  beta: float = 0.9) -> list[ChunkPlan]:
    """Lockstep version of :func:`dynamic_plan` over several utterances.

    ``encoder_fn(indices, masks)`` encodes the prefixes of the listed
    utterances under the given masks in one call. Results equal running
    :func:`dynamic_plan` on each utterance separately.
    """
    for T in Ts:
        if T <= 0:
            raise PlanError(f"T must be positive, got {T}")
    n = len(Ts)
    h = np.zeros((n, p.d))
    c = np.zeros((n, p.d))
    chunks: list[list[Chunk]] = [[] for _ in range(n)]
    diags: list[list[dict]] = [[] for _ in range(n)]
    start = [0] * n
    active = list(range(n))
    while active:
        with no_grad():
            w_hat, s_hat, alpha, z = controller_forward(Tensor(h[active]), Tensor(c[active]), p)
        if not (np.all(np.isfinite(w_hat.data)) and np.all(np.isfinite(s_hat.data))):
            raise NumericError("dynamic_plans", "non-finite controller output")
        pending = []
        for r, i in enumerate(active):
            T = Ts[i]
            if len(chunks[i]) > 4 * T:
                raise PlanError(f"runaway plan: more than {4 * T} chunks for T={T}")
            w, s = float(w_hat.data[r]), float(s_hat.data[r])
            W, S = discretize(w, s, p.bounds)
            chunk = Chunk(start[i], min(W, T - start[i]), S)
            chunks[i].append(chunk)
            diags[i].append({"alpha": float(alpha.data[r]), "z": z.data[r].copy(), "w_hat": w,
                             "s_hat": s, "h_in": h[i].copy(), "c_in": c[i].copy()})
            start[i] += S
            if start[i] < T:
                pending.append(i)
        active = pending
        if encoder_fn is None or not active:
            continue
        provs = [_provisional_plan(chunks[i], min(chunks[i][-1].end, Ts[i])) for i in active]
        states = encoder_fn(active, [build_attention_mask(pr, carry_over) for pr in provs])
        for i, pr, st in zip(active, provs, states):
            lo, hi = pr.stride_region(len(chunks[i]) - 1)
            hn = np.asarray(st)[lo:hi].mean(axis=0)
            if not np.all(np.isfinite(hn)):
                raise NumericError("dynamic_plans", "non-finite chunk summary")
            h[i] = hn
            c[i] = update_context(c[i], hn, beta)
    return [ChunkPlan(chunks[i], Ts[i], diags[i]) for i in range(n)]


# ------------------------------------------------------------ latency

@dataclass
class LatencyRecord:
    t_input: list[float]
    t_decode: list[float]

    def __post_init__(self):
        if len(self.t_input) != len(self.t_decode):
            raise ValueError("t_input and t_decode must have equal length")

    def report(self) -> dict:
        per = [{"label": i, "t_input": a, "t_decode": b, "latency": b - a}
               for i, (a, b) in enumerate(zip(self.t_input, self.t_decode))]
        return {"apl_seconds": measure_apl(self) if per else None, "per_label": per}


def measure_apl(rec: LatencyRecord) -> float:
    """Average over labels of decode completion minus input availability."""
    if not rec.t_decode:
        raise ValueError("latency record is empty")
    return float(np.mean(np.asarray(rec.t_decode) - np.asarray(rec.t_input)))


def latency_from_alignment(emit_frames: Sequence[int], plan: ChunkPlan, subsample: int,
                           raw_shift: float = 0.01, compute_time: Sequence[float] | None = None
                           ) -> LatencyRecord:
    """Simulated latency for labels emitted at encoder frames ``emit_frames``.

    Raw frame f becomes available at ``f * raw_shift`` seconds. A label's
    input time is the availability of the last raw frame of its emitting
    encoder frame; its decode time is the availability of the last raw frame
    of the owning chunk's window (plus that chunk's compute time, if given).
    """
    own = plan.owners()
    t_in, t_dec = [], []
    for f in emit_frames:
        n = int(own[f])
        end = min(plan.chunks[n].end, plan.T)
        t_in.append((f * subsample + subsample - 1) * raw_shift)
        done = (end * subsample - 1) * raw_shift
        if compute_time is not None:
            done += compute_time[n]
        t_dec.append(done)
    return LatencyRecord(t_in, t_dec)


def apl_surrogate(w_hat: Tensor, bounds: Bounds, frame_shift: float) -> Tensor:
    """Differentiable latency proxy: mean half-width of the continuous chunk widths."""
    widths = add(scale(w_hat, float(bounds.w_max - bounds.w_min)),
                 Tensor(np.full(w_hat.shape, float(bounds.w_min))))
    return scale(mean(widths), 0.5 * frame_shift)
