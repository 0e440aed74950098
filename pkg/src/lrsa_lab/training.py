"""Optimisation loop: decoupled AdamW under a one-cycle schedule.

Training is deterministic: a fixed seed fixes the initial parameters, the
per-epoch sample order and therefore the whole history bit-for-bit. The
loss is the per-sample relative L2 norm in normalised target space,
optionally plus a weighted relative L2 of finite-difference gradients
(used for the Darcy task). Metrics are always reported in de-normalised
target space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, TrainingError
from .lrsa import (
    BackboneParams,
    LRSAConfig,
    backbone_forward,
    init_backbone_params,
    named_parameters,
    save_checkpoint,
)
from .nn import positional_encoding
from .pde import OperatorDataset, fd_gradient_matrix, grad_metric_lg, mse, relative_l2
from .tensor import (
    Tensor,
    matmul,
    no_grad,
    reshape,
    scale,
    sqrt,
    sub,
    sum_all,
    transpose,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

LOSS_KINDS = ("rel_l2", "rel_l2_plus_lg")

HISTORY_HEADER = "epoch,train_loss,test_rel_l2,lr"


@dataclass
class TrainConfig:
    max_lr: float = 1e-3
    weight_decay: float = 1e-5
    epochs: int = 200
    batch_size: int = 8
    seed: int = 0
    loss_kind: str = "rel_l2"
    lg_weight: float = 0.1
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    def validate(self, allow_zero_epochs: bool = True) -> None:
        floor = 0 if allow_zero_epochs else 1
        if self.epochs < floor:
            raise ContractError(f"epochs must be >= {floor}, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_lr <= 0:
            raise ContractError(f"max_lr must be positive, got {self.max_lr}")
        if self.weight_decay < 0:
            raise ContractError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 < self.pct_start < 1.0:
            raise ContractError(f"pct_start must lie in (0, 1), got {self.pct_start}")
        if self.div_factor <= 1 or self.final_div_factor <= 1:
            raise ContractError("div factors must exceed 1")
        if self.loss_kind not in LOSS_KINDS:
            raise ContractError(f"loss_kind {self.loss_kind!r} not in {LOSS_KINDS}")


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_adamw_state(named: list[tuple[str, Tensor]]) -> AdamWState:
    state = AdamWState()
    for name, p in named:
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adamw_step(
    named: list[tuple[str, Tensor]],
    state: AdamWState,
    lr: float,
    weight_decay: float,
) -> None:
    """One decoupled AdamW update in place; a missing grad counts as zero.

    p <- p - lr*wd*p - lr * mhat / (sqrt(vhat) + eps), with bias-corrected
    first and second moments.
    """
    state.step += 1
    bc1 = 1.0 - ADAM_BETA1**state.step
    bc2 = 1.0 - ADAM_BETA2**state.step
    for name, p in named:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


def onecycle_lr(
    step: int,
    total_steps: int,
    max_lr: float,
    pct_start: float = 0.3,
    div_factor: float = 25.0,
    final_div_factor: float = 1e4,
) -> float:
    """One-cycle schedule: cosine ramp max_lr/div_factor -> max_lr over the
    first pct_start fraction of steps, cosine decay to
    max_lr/final_div_factor over the rest."""
    if total_steps < 1:
        raise ContractError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warm = pct_start * total_steps
    start_lr = max_lr / div_factor
    final_lr = max_lr / final_div_factor
    if step <= warm:
        frac = step / warm if warm > 0 else 1.0
        return start_lr + (max_lr - start_lr) * 0.5 * (1.0 - math.cos(math.pi * frac))
    frac = (step - warm) / (total_steps - warm)
    return final_lr + (max_lr - final_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))


def _sample_loss(
    pred: Tensor,
    target: np.ndarray,
    loss_kind: str,
    lg_weight: float,
    grid_shape: tuple[int, ...],
    d_matrix: np.ndarray | None,
) -> Tensor:
    diff = sub(pred, Tensor(target))
    sq = sum_all(diff * diff)
    rel = scale(sqrt(sq), 1.0 / float(np.linalg.norm(target)))
    if loss_kind == "rel_l2":
        return rel
    d_const = Tensor(d_matrix)
    if len(grid_shape) == 1:
        gp = matmul(d_const, reshape(pred, grid_shape + (1,)))
        gt = d_matrix @ target.reshape(grid_shape + (1,))
        err = sub(gp, Tensor(gt))
        num = sum_all(err * err)
        denom = float(np.linalg.norm(gt))
    else:
        up = reshape(pred, grid_shape)
        ut = target.reshape(grid_shape)
        gxp = matmul(d_const, up)
        gyp = matmul(up, transpose(d_const))
        gxt = d_matrix @ ut
        gyt = ut @ d_matrix.T
        ex = sub(gxp, Tensor(gxt))
        ey = sub(gyp, Tensor(gyt))
        num = sum_all(ex * ex) + sum_all(ey * ey)
        denom = math.hypot(float(np.linalg.norm(gxt)), float(np.linalg.norm(gyt)))
    lg = scale(sqrt(num), 1.0 / denom)
    return rel + scale(lg, lg_weight)


def evaluate(
    cfg: LRSAConfig,
    params: BackboneParams,
    dataset: OperatorDataset,
    split: str = "test",
) -> dict:
    """Metrics in de-normalised target space over a dataset split."""
    indices = {
        "train": list(dataset.train_indices),
        "test": list(dataset.test_indices),
        "all": list(range(dataset.count)),
    }.get(split)
    if indices is None:
        raise ContractError(f"split must be train/test/all, got {split!r}")
    if not indices:
        raise ContractError(f"split {split!r} is empty")
    pe = positional_encoding(dataset.coords, cfg.num_freqs)
    preds = np.empty((len(indices),) + dataset.targets.shape[1:])
    with no_grad():
        for row, i in enumerate(indices):
            out = backbone_forward(dataset.point_set(i), cfg, params, pe=pe)
            preds[row] = dataset.denormalise_target(out.data)
    truth = dataset.targets[indices]
    return {
        "split": split,
        "count": len(indices),
        "rel_l2": relative_l2(preds, truth),
        "mse": mse(preds, truth),
        "l_g": grad_metric_lg(preds, truth, dataset.grid_shape),
    }


def write_history_csv(history: list[dict], path) -> None:
    lines = [HISTORY_HEADER]
    for row in history:
        lines.append(
            f"{row['epoch']},{row['train_loss']:.17g},{row['test_rel_l2']:.17g},{row['lr']:.17g}"
        )
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def train(
    cfg: LRSAConfig,
    dataset: OperatorDataset,
    tcfg: TrainConfig,
    out_dir=None,
) -> tuple[BackboneParams, list[dict]]:
    """Train a backbone on the dataset's train split.

    Returns the trained parameters and the per-epoch history (epoch,
    mean train loss, de-normalised test relative L2, last learning rate).
    With out_dir set, writes checkpoint/ and history.csv there. A
    non-finite or exploding (> 1e6) loss raises TrainingError after
    saving the last finished epoch's parameters.
    """
    cfg.validate(allow_empty_depth=True)
    tcfg.validate(allow_zero_epochs=True)
    if cfg.d_in != dataset.inputs.shape[2] or cfg.d_out != dataset.targets.shape[2]:
        raise ContractError(
            f"config channels (d_in={cfg.d_in}, d_out={cfg.d_out}) do not match "
            f"dataset ({dataset.inputs.shape[2]}, {dataset.targets.shape[2]})"
        )
    if tcfg.loss_kind == "rel_l2_plus_lg" and cfg.d_out != 1:
        raise ContractError("gradient-penalised loss needs a single output channel")

    params = init_backbone_params(cfg, seed=tcfg.seed)
    named = named_parameters(params)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    history: list[dict] = []
    if tcfg.epochs == 0:
        if out_path is not None:
            save_checkpoint(out_path / "checkpoint", cfg, params, step=0)
            write_history_csv(history, out_path / "history.csv")
        return params, history

    train_idx = np.array(list(dataset.train_indices))
    if train_idx.size == 0:
        raise ContractError("dataset has no training samples")
    norm_inputs = (dataset.inputs - dataset.input_mean) / dataset.input_std
    norm_targets = (dataset.targets - dataset.target_mean) / dataset.target_std
    pe = positional_encoding(dataset.coords, cfg.num_freqs)
    d_matrix = (
        fd_gradient_matrix(dataset.grid_shape[0])
        if tcfg.loss_kind == "rel_l2_plus_lg"
        else None
    )

    state = init_adamw_state(named)
    order_rng = np.random.default_rng(np.random.SeedSequence(tcfg.seed, spawn_key=(1,)))
    steps_per_epoch = math.ceil(train_idx.size / tcfg.batch_size)
    total_steps = tcfg.epochs * steps_per_epoch
    last_good = [t.data.copy() for _, t in named]
    global_step = 0
    lr = onecycle_lr(
        0, total_steps, tcfg.max_lr, tcfg.pct_start, tcfg.div_factor, tcfg.final_div_factor
    )

    def fail(reason: str):
        for (_, t), saved in zip(named, last_good):
            t.data = saved
        if out_path is not None:
            save_checkpoint(out_path / "checkpoint", cfg, params, step=global_step)
        raise TrainingError(reason)

    for epoch in range(tcfg.epochs):
        perm = order_rng.permutation(train_idx)
        epoch_losses = []
        for start in range(0, perm.size, tcfg.batch_size):
            batch = perm[start : start + tcfg.batch_size]
            for _, p in named:
                p.grad = None
            batch_loss = None
            for i in batch:
                ps = PointSetView(dataset.coords, norm_inputs[i], dataset.quad_weight)
                pred = backbone_forward(ps, cfg, params, pe=pe)
                loss = _sample_loss(
                    pred,
                    norm_targets[i],
                    tcfg.loss_kind,
                    tcfg.lg_weight,
                    dataset.grid_shape,
                    d_matrix,
                )
                batch_loss = loss if batch_loss is None else batch_loss + loss
            batch_loss = scale(batch_loss, 1.0 / batch.size)
            loss_value = batch_loss.item()
            if not math.isfinite(loss_value) or loss_value > 1e6:
                fail(f"loss diverged at epoch {epoch}, step {global_step}: {loss_value}")
            batch_loss.backward()
            lr = onecycle_lr(
                global_step,
                total_steps,
                tcfg.max_lr,
                tcfg.pct_start,
                tcfg.div_factor,
                tcfg.final_div_factor,
            )
            adamw_step(named, state, lr, tcfg.weight_decay)
            global_step += 1
            epoch_losses.append(loss_value)
        if dataset.count > dataset.train_count:
            test_rel = evaluate(cfg, params, dataset, split="test")["rel_l2"]
        else:
            test_rel = float("nan")
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)),
                "test_rel_l2": test_rel,
                "lr": lr,
            }
        )
        last_good = [t.data.copy() for _, t in named]

    if out_path is not None:
        save_checkpoint(out_path / "checkpoint", cfg, params, step=global_step)
        write_history_csv(history, out_path / "history.csv")
    return params, history


class PointSetView:
    """Lightweight stand-in for PointSet used inside the training loop."""

    __slots__ = ("coords", "features", "quad_weight")

    def __init__(self, coords, features, quad_weight):
        self.coords = coords
        self.features = features
        self.quad_weight = quad_weight
