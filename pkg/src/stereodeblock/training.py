"""Adam training with the stepped learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import metrics
from .autodiff import Tape, Tensor
from .jpegcodec import to_levels, to_unit
from .model import DeblockNet, loss_l1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch: int = 8                 # stereo pairs per step (reference run: 48)
    lr: float = 2e-4
    lr_decay: float = 0.1
    lr_step_epochs: int = 20
    lr_floor: float = 2e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    qf_range: tuple[int, int] = (10, 30)
    per_pixel_loss: bool = False
    seed: int = 0


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for a 1-indexed epoch: decays every lr_step_epochs."""
    if epoch < 1:
        raise ValueError("epochs are 1-indexed")
    lr = cfg.lr * cfg.lr_decay ** ((epoch - 1) // cfg.lr_step_epochs)
    return max(lr, cfg.lr_floor)


class Adam:
    def __init__(self, params: list[tuple[str, Tensor]], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        b1t = 1.0 - cfg.beta1 ** self.t
        b2t = 1.0 - cfg.beta2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - cfg.beta1) * (g - m)
            v += (1.0 - cfg.beta2) * (g * g - v)
            p.data = p.data - lr * (m / b1t) / (np.sqrt(v / b2t) + cfg.adam_eps)


def pair_tensors(sample) -> tuple[tuple[Tensor, Tensor], tuple[Tensor, Tensor]]:
    """Unit-interval input and target tensors for one stereo sample."""
    inp = (Tensor(to_unit(sample.degraded_left)[None, None]),
           Tensor(to_unit(sample.degraded_right)[None, None]))
    tgt = (Tensor(to_unit(sample.clean_left)[None, None]),
           Tensor(to_unit(sample.clean_right)[None, None]))
    return inp, tgt


def evaluate_psnr(model: DeblockNet, samples) -> float:
    """Mean output PSNR (both views) against the clean planes."""
    vals = []
    for s in samples:
        (in_l, in_r), _ = pair_tensors(s)
        out_l, out_r = model(in_l, in_r)
        vals.append(metrics.psnr(s.clean_left, to_levels(out_l.data[0, 0])))
        vals.append(metrics.psnr(s.clean_right, to_levels(out_r.data[0, 0])))
    return float(np.mean([min(v, 100.0) for v in vals]))


def train_steps(model: DeblockNet, samples, cfg: TrainConfig, steps: int,
                log_every: int = 0, log_fn=print) -> list[float]:
    """Run a fixed number of optimizer steps; returns the per-step losses."""
    params = list(model.named_params())
    opt = Adam(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    losses = []
    order = []
    for step in range(steps):
        if not order:
            order = list(rng.permutation(len(samples)))
        take = [order.pop() for _ in range(min(cfg.batch, len(order)))]
        loss = _optimize_batch(model, [samples[i] for i in take], cfg, opt, cfg.lr)
        losses.append(loss)
        if log_every and (step + 1) % log_every == 0:
            log_fn(f"step {step + 1}/{steps} loss {loss:.6f}")
    return losses


def _optimize_batch(model, batch, cfg, opt, lr) -> float:
    with Tape() as tape:
        outs, tgts = [], []
        for s in batch:
            inp, tgt = pair_tensors(s)
            outs.append(model(*inp))
            tgts.append(tgt)
        loss = loss_l1(outs, tgts, per_pixel=cfg.per_pixel_loss)
        try:
            tape.backward(loss)
        except ad.NonFiniteError as e:
            raise ad.NonFiniteError(
                f"training diverged (loss {float(loss.data):.4g}): {e}") from e
    opt.step(lr)
    return float(loss.data)


def train(model: DeblockNet, samples, cfg: TrainConfig,
          val_samples=None, log_fn=print) -> list[dict]:
    """Epoch-based training: deterministic for a fixed seed and dataset.

    Returns one log record per epoch with the mean loss, the learning rate,
    and the validation PSNR.
    """
    if not samples:
        raise ValueError("empty training dataset")
    val_samples = val_samples if val_samples is not None else samples
    params = list(model.named_params())
    opt = Adam(params, cfg)
    log = []
    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at_epoch(cfg, epoch)
        order = np.random.default_rng((cfg.seed, epoch)).permutation(len(samples))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch):
            batch = [samples[i] for i in order[start:start + cfg.batch]]
            epoch_losses.append(_optimize_batch(model, batch, cfg, opt, lr))
        record = {
            "epoch": epoch,
            "lr": lr,
            "mean_loss": float(np.mean(epoch_losses)),
            "val_psnr": evaluate_psnr(model, val_samples),
        }
        log.append(record)
        log_fn(f"epoch {epoch:3d}  lr {lr:.2e}  "
               f"loss {record['mean_loss']:.6f}  val_psnr {record['val_psnr']:.3f}")
    return log
