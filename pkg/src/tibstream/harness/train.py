"""Three-stage training driver: global, static-chunk and dynamic-chunk stages."""

from __future__ import annotations

import json
import time
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..chunking import ChunkPlan, apl_surrogate, build_attention_mask, controller_forward, \
    dynamic_plans, static_plan
from ..model import ASRModel, DecoderConfig, EncoderConfig, Stage, TrainConfig, dynamic_loss
from ..numerics import Adam, Tensor, backward, load_checkpoint, save_checkpoint
from .synth import Utterance


class TrainingError(RuntimeError):
    pass


def encoder_length(model: ASRModel, n_frames: int) -> int:
    return -(-n_frames // model.enc.subsample)


def stage_plans(model: ASRModel, feats: Sequence[np.ndarray], cfg: TrainConfig) -> list[ChunkPlan] | None:
    """Chunk plans for a batch under the stage's masking rule (None for full attention)."""
    Ts = [encoder_length(model, len(f)) for f in feats]
    if cfg.stage is Stage.GLOBAL:
        return None
    if cfg.stage is Stage.STATIC:
        return [static_plan(T, cfg.static_width, cfg.static_stride) for T in Ts]
    return dynamic_plans(model.encode_prefix_batch_fn(feats), Ts, model.controller,
                         cfg.carry_over, cfg.context_decay)


def batch_objective(model: ASRModel, feats, targets, cfg: TrainConfig, rng=None, offsets=None,
                    plans: list[ChunkPlan] | None = None) -> dict:
    """Loss tensors for one batch. ``plans`` overrides the stage's own planning."""
    if plans is None:
        plans = stage_plans(model, feats, cfg)
    masks = None if plans is None else [build_attention_mask(p, cfg.carry_over) for p in plans]
    out = model.losses(feats, targets, masks, cfg.ctc_weight, rng, offsets)
    out["plans"] = plans
    out["objective"] = out["total"]
    out["apl_surrogate"] = None
    if cfg.stage is Stage.DYNAMIC:
        h = np.stack([d["h_in"] for p in plans for d in p.diagnostics])
        c = np.stack([d["c_in"] for p in plans for d in p.diagnostics])
        w_hat, _, _, _ = controller_forward(Tensor(h), Tensor(c), model.controller)
        sur = apl_surrogate(w_hat, cfg.bounds, 0.01 * model.enc.subsample)
        out["apl_surrogate"] = sur
        out["objective"] = dynamic_loss(out["total"], sur, cfg.latency_weight)
    return out


def save_model(model: ASRModel, path) -> None:
    path = Path(path)
    save_checkpoint(path, model.state_dict())
    meta = {"vocab_size": model.vocab_size, "enc": asdict(model.enc),
            "controller_hidden": model.controller.k, "bounds": asdict(model.controller.bounds)}
    dec = asdict(model.dec)
    dec.pop("causal")
    meta["dec"] = dec
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1))


def load_model(path) -> ASRModel:
    from ..chunking import Bounds
    path = Path(path)
    if not path.exists():
        raise TrainingError(f"checkpoint {path} does not exist")
    meta_path = Path(str(path) + ".json")
    if not meta_path.exists():
        raise TrainingError(f"checkpoint metadata {meta_path} does not exist")
    meta = json.loads(meta_path.read_text())
    model = ASRModel(meta["vocab_size"], EncoderConfig(**meta["enc"]), DecoderConfig(**meta["dec"]),
                     Bounds(**meta["bounds"]), meta["controller_hidden"])
    model.load_state_dict(load_checkpoint(path))
    return model


def run_stage(model: ASRModel | None, data: Sequence[Utterance], cfg: TrainConfig,
              checkpoint_in=None, checkpoint_out=None, log_path=None,
              on_step: Callable[[dict], None] | None = None) -> list[dict]:
    """Train one stage in place and return its per-step log.

    Static and dynamic stages continue from a previous stage: either pass
    the model object or a ``checkpoint_in`` path (which must exist). A
    checkpoint given alongside a model is loaded into it.
    """
    if checkpoint_in is not None:
        loaded = load_model(checkpoint_in)
        if model is None:
            model = loaded
        else:
            model.load_state_dict(loaded.state_dict())
    elif cfg.stage is not Stage.GLOBAL and model is None:
        raise TrainingError(f"{cfg.stage.value} stage needs a prior-stage checkpoint")
    if model is None:
        raise TrainingError("global stage needs a freshly initialised model")
    if not data:
        raise TrainingError("empty training set")

    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, lr=cfg.lr)
    logs: list[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(data))
            for b0 in range(0, len(order), cfg.batch_size):
                batch = [data[i] for i in order[b0:b0 + cfg.batch_size]]
                feats = [u.feats for u in batch]
                targets = [u.ids for u in batch]
                offsets = rng.integers(0, cfg.max_position_offset + 1, size=len(batch)) \
                    if cfg.max_position_offset else None
                t0 = time.perf_counter()
                out = batch_objective(model, feats, targets, cfg, rng, offsets)
                opt.zero_grad()
                backward(out["objective"])
                gnorm = opt.step(cfg.clip)
                step += 1
                sur = out["apl_surrogate"]
                rec = {"stage": cfg.stage.value, "step": step, "epoch": epoch,
                       "loss": float(out["objective"].data), "ctc": float(out["ctc"].data),
                       "attn": float(out["attn"].data),
                       "apl_surrogate": None if sur is None else float(sur.data),
                       "grad_norm": gnorm, "seconds": time.perf_counter() - t0}
                logs.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                if on_step:
                    on_step(rec)
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_out is not None:
        save_model(model, checkpoint_out)
    return logs


def epoch_means(logs: list[dict], key: str = "loss") -> list[float]:
    by: dict[int, list[float]] = {}
    for r in logs:
        by.setdefault(r["epoch"], []).append(r[key])
    return [float(np.mean(by[e])) for e in sorted(by)]
