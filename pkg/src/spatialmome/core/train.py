from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..numerics import (NumericError, OptimizerConfig, OptimizerState, Tape, adamw_step, forward_backward,
                        layerwise_scale, lr_at, no_record)
from ..seeding import rng_for
from .model import MaskPlan, ModelInputs, SpatialModel, pretrain_loss, sample_mask

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    epochs: int = 10
    batch_size: int = 32
    max_steps: int | None = None
    probe_size: int = 32
    seed: int = 0


@dataclass
class PretrainResult:
    model: SpatialModel
    trace: list[tuple[int, float]]  # (epoch, mean loss over the epoch's steps)
    step_losses: list[float]
    probe_initial: float
    probe_final: float
    steps: int = 0
    opt_state: OptimizerState = field(default_factory=OptimizerState)


def mask_batch(nbhds, inputs: ModelInputs, model: SpatialModel, seed: int, step: int) -> list[MaskPlan]:
    rng = rng_for(seed, "mask", step)
    return [sample_mask(nb, inputs, model.config, rng) for nb in nbhds]


def probe_batch(inputs: ModelInputs, model: SpatialModel, seed: int, size: int):
    """A fixed batch and mask used to compare losses before and after training."""
    rng = rng_for(seed, "probe")
    idx = np.sort(rng.choice(len(inputs.neighborhoods), size=min(size, len(inputs.neighborhoods)), replace=False))
    nbhds = [inputs.neighborhoods[i] for i in idx]
    plans = [sample_mask(nb, inputs, model.config, rng) for nb in nbhds]
    return nbhds, plans


def probe_loss(model: SpatialModel, inputs: ModelInputs, probe) -> float:
    with no_record():
        return float(pretrain_loss(model, inputs, *probe).total.data)


def pretrain_run(model: SpatialModel, inputs: ModelInputs, opt: OptimizerConfig,
                 train: PretrainConfig) -> PretrainResult:
    """Masked pretraining with AdamW, warmup+cosine schedule and layer decay.

    ``opt.total_epochs`` and ``opt.warmup_epochs`` are measured in epochs;
    the schedule is evaluated at fractional epochs, one value per step.
    """
    nb_all = inputs.neighborhoods
    if not nb_all:
        raise ValueError("no neighbourhoods to train on")
    params = model.trainable()
    total_depth = model.config.n_blocks + 1
    scale = {k: layerwise_scale(model.param_depth(k), total_depth, opt.layer_decay_lambda) for k in params}
    state = OptimizerState()
    probe = probe_batch(inputs, model, train.seed, train.probe_size)
    initial = probe_loss(model, inputs, probe)

    steps_per_epoch = -(-len(nb_all) // train.batch_size)
    trace: list[tuple[int, float]] = []
    step_losses: list[float] = []
    step = 0
    for epoch in range(train.epochs):
        order = rng_for(train.seed, "shuffle", epoch).permutation(len(nb_all))
        epoch_losses = []
        for b in range(steps_per_epoch):
            if train.max_steps is not None and step >= train.max_steps:
                break
            batch = [nb_all[i] for i in order[b * train.batch_size:(b + 1) * train.batch_size]]
            plans = mask_batch(batch, inputs, model, train.seed, step)
            if not any(len(p.masked[m]) for p in plans for m in p.masked):
                step += 1
                continue
            with Tape() as tape:
                loss = pretrain_loss(model, inputs, batch, plans).total
            try:
                grads = forward_backward(tape, loss, params.values())
            except NumericError as exc:
                raise NumericError(f"divergence at step {step}: {exc}") from exc
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"divergence at step {step}: loss {value}")
            epoch_now = min(epoch + b / steps_per_epoch, opt.total_epochs)
            adamw_step(params, {k: grads[p] for k, p in params.items()}, state, opt,
                       lr_at(opt, epoch_now), scale)
            epoch_losses.append(value)
            step_losses.append(value)
            step += 1
        if epoch_losses:
            trace.append((epoch, float(np.mean(epoch_losses))))
            log.info("epoch %d loss %.6f", epoch, trace[-1][1])
        if train.max_steps is not None and step >= train.max_steps:
            break
    final = probe_loss(model, inputs, probe)
    return PretrainResult(model, trace, step_losses, initial, final, step, state)
