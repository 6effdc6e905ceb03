"""The symmetric stereo deblocking network: shared feature extraction,
two coarse-to-fine cross-view interaction stages, and global-residual
reconstruction. One parameter set serves both views.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import Conv2d, Module, MultiScaleBlock, ResidualDenseBlock
from .fusion import CrossViewFusion
from .parallax import ConvertedFeatures, biptm_forward
from . import tensorio

# reference model budget for the info report (millions of params, G-MACs
# for a 100x100 stereo pair)
PARAM_BUDGET_M = 0.91
MACS_BUDGET_G = 16.64


@dataclass(frozen=True)
class NetConfig:
    channels: int = 32
    growth: int = 32
    fe_blocks: int = 4
    rec_blocks: int = 4
    stages: int = 2
    ca_reduction: int = 4
    share_fusion_across_stages: bool = False
    attention: str = "hard"          # "hard" | "soft"
    same_row_only: bool = False

    def scaled(self, **kw) -> "NetConfig":
        return replace(self, **kw)

    def lines(self) -> str:
        return "\n".join(f"{f.name} = {getattr(self, f.name)}" for f in fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.lines().encode()).hexdigest()[:16]


TINY_CONFIG = NetConfig(channels=8, growth=8)


class DeblockNet(Module):
    """Restores a compressed stereo pair; untrained it is the identity
    (the reconstruction tail starts at zero)."""

    def __init__(self, config: NetConfig = NetConfig(), seed: int = 0):
        if config.channels % 2 or config.channels % config.ca_reduction:
            raise ValueError("channels must divide by 2 and by the CA reduction")
        self.config = config
        rng = np.random.default_rng(seed)
        c, g = config.channels, config.growth
        self.head = Conv2d(1, c, 3, rng)
        self.msb = MultiScaleBlock(c, rng)
        self.fe_rdbs = [ResidualDenseBlock(c, g, rng) for _ in range(config.fe_blocks)]
        n_fusion = 1 if config.share_fusion_across_stages else config.stages
        self.fusions = [CrossViewFusion(c, g, rng, config.ca_reduction)
                        for _ in range(n_fusion)]
        self.rec_rdbs = [ResidualDenseBlock(c, g, rng) for _ in range(config.rec_blocks)]
        self.tail = Conv2d(c, 1, 3, rng, zero_init=True)

    def named_params(self, prefix: str = ""):
        # config is plain data, not a parameter holder
        for key, value in super().named_params(prefix):
            yield key, value

    def extract(self, x: Tensor) -> Tensor:
        h = self.msb(self.head(x))
        for block in self.fe_rdbs:
            h = block(h)
        return h

    def reconstruct(self, f: Tensor, base: Tensor) -> Tensor:
        h = f
        for block in self.rec_rdbs:
            h = block(h)
        return ad.add(base, self.tail(h))

    def forward(self, left: Tensor, right: Tensor,
                collect: list | None = None) -> tuple[Tensor, Tensor]:
        """Run a unit-interval 1 x 1 x H x W pair through the network.

        ``collect`` (if given) receives the per-stage (ConvertedFeatures,
        ConvertedFeatures) pairs for inspection dumps.
        """
        if left.shape != right.shape:
            raise ValueError("stereo views must share a shape")
        if left.data.ndim != 4 or left.shape[0] != 1 or left.shape[1] != 1:
            raise ValueError("expected 1 x 1 x H x W image tensors")
        if left.shape[2] % 8 or left.shape[3] % 8:
            raise ValueError(f"extents {left.shape[2:]} not divisible by 8")
        f_a, f_b = self.extract(left), self.extract(right)
        cfg = self.config
        for stage in range(cfg.stages):
            fuse = self.fusions[0 if cfg.share_fusion_across_stages else stage]
            a2b, b2a = biptm_forward(f_a, f_b, mode=cfg.attention,
                                     same_row_only=cfg.same_row_only)
            if collect is not None:
                collect.append((a2b, b2a))
            f_a, f_b = (fuse(f_a, b2a.features, b2a.confidence),
                        fuse(f_b, a2b.features, a2b.confidence))
        return self.reconstruct(f_a, left), self.reconstruct(f_b, right)

    def __call__(self, left, right, **kw):
        return self.forward(left, right, **kw)

    # -- accounting ---------------------------------------------------------

    def param_breakdown(self) -> dict[str, int]:
        fe = (self.head.param_count() + self.msb.param_count()
              + sum(b.param_count() for b in self.fe_rdbs))
        fusion = [f.param_count() for f in self.fusions]
        rec = (sum(b.param_count() for b in self.rec_rdbs)
               + self.tail.param_count())
        out = {"feature_extraction": fe}
        for i, n in enumerate(fusion):
            out[f"fusion_stage{i + 1}"] = n
        out["reconstruction"] = rec
        out["total"] = fe + sum(fusion) + rec
        # the alternative reading where one fusion block serves every stage
        out["total_if_fusion_shared"] = fe + fusion[0] + rec
        return out

    def macs_estimate(self, h: int, w: int) -> int:
        """Analytic multiply-accumulate count of every convolution for one
        stereo pair at the given extents."""
        per_view = (self.head.macs(h, w) + self.msb.macs(h, w)
                    + sum(b.macs(h, w) for b in self.fe_rdbs)
                    + sum(b.macs(h, w) for b in self.rec_rdbs)
                    + self.tail.macs(h, w))
        fuse = self.fusions[0]
        stage_cost = 2 * fuse.macs(h, w)  # applied once per view
        return 2 * per_view + self.config.stages * stage_cost


def loss_l1(outputs: list[tuple[Tensor, Tensor]],
            targets: list[tuple[Tensor, Tensor]],
            per_pixel: bool = False) -> Tensor:
    """Mean over the batch of the two views' L1 reconstruction errors.

    Each view contributes the sum of absolute pixel differences; with
    ``per_pixel`` the sums become means (changes only the effective
    learning rate).
    """
    if len(outputs) != len(targets) or not outputs:
        raise ValueError("outputs and targets must be equal-length, non-empty")
    total = None
    for (o_l, o_r), (t_l, t_r) in zip(outputs, targets):
        if o_l.shape != t_l.shape or o_r.shape != t_r.shape:
            raise ValueError("output/target shape mismatch")
        term = ad.add(ad.tensor_sum(ad.absolute(ad.sub(o_l, t_l))),
                      ad.tensor_sum(ad.absolute(ad.sub(o_r, t_r))))
        if per_pixel:
            term = ad.scale(term, 1.0 / (2 * o_l.size))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(outputs))


# -- checkpointing -----------------------------------------------------------


def save_checkpoint(ckpt_dir, model: DeblockNet, epoch: int = 0, seed: int = 0) -> None:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, t in model.named_params():
        fname = name.replace(".", "_") + ".tns"
        tensorio.write_tensor(ckpt_dir / fname, t.data)
        entries[name] = fname
    tensorio.write_manifest(ckpt_dir / "manifest.txt", entries)
    header = (f"config_hash {model.config.digest()}\n"
              f"epoch {epoch}\nseed {seed}\n--config--\n"
              + model.config.lines() + "\n")
    tensorio.atomic_write_text(ckpt_dir / "header.txt", header)


def _parse_header(text: str) -> tuple[dict, NetConfig]:
    meta, in_cfg, cfg_kv = {}, False, {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line == "--config--":
            in_cfg = True
            continue
        key, _, value = line.partition(" = " if in_cfg else " ")
        (cfg_kv if in_cfg else meta)[key.strip()] = value.strip()
    kwargs = {}
    for f in fields(NetConfig):
        raw = cfg_kv[f.name]
        if f.type == "bool" or isinstance(getattr(NetConfig(), f.name), bool):
            kwargs[f.name] = raw == "True"
        elif isinstance(getattr(NetConfig(), f.name), int):
            kwargs[f.name] = int(raw)
        else:
            kwargs[f.name] = raw
    return meta, NetConfig(**kwargs)


def load_checkpoint(ckpt_dir) -> tuple[DeblockNet, dict]:
    ckpt_dir = Path(ckpt_dir)
    meta, config = _parse_header((ckpt_dir / "header.txt").read_text())
    if config.digest() != meta.get("config_hash"):
        raise ValueError("checkpoint header hash does not match its config")
    model = DeblockNet(config, seed=int(meta.get("seed", 0)))
    entries = tensorio.read_manifest(ckpt_dir / "manifest.txt")
    params = dict(model.named_params())
    if set(entries) != set(params):
        missing = set(params) ^ set(entries)
        raise ValueError(f"checkpoint does not match the model: {sorted(missing)[:4]}")
    for name, fname in entries.items():
        arr = tensorio.read_tensor(ckpt_dir / fname)
        if arr.shape != params[name].shape:
            raise ValueError(f"parameter {name}: shape {arr.shape} != {params[name].shape}")
        params[name].data = arr.astype(params[name].data.dtype)
    return model, meta
