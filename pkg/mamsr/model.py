"""
A residual super-resolution network built from multi-path adaptive
modulation blocks (MAMBs).

Each block computes X = conv2(ReLU(conv1(F))) and returns
F + sigmoid(M_csi + M_icd + M_csd) * X, where the three modulation maps come from
a pooled channel statistic (CSI), two fully-connected layers over a pooled
statistic (ICD) and a 3x3 depth-wise convolution (CSD). Disabled paths add
nothing; with every path disabled the block is a plain residual block.

The network is: head conv -> R blocks -> feat conv -> global skip from the head
-> sub-pixel upscaling stages -> reconstruction conv.
"""
import enum
import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_serializer, model_validator

from mamsr import tensor_ops as ops
from mamsr.tensor_ops import Activation, ConvParams, DenseParams, PoolStatistic, ShapeError

IMAGE_CHANNELS = 3

# x4 is two chained x2 stages
UPSCALE_STAGES = {2: (2,), 3: (3,), 4: (2, 2)}

PRESETS = {
    "r16c64": {"blocks": 16, "channels": 64},
    "r64c64": {"blocks": 64, "channels": 64},
}


class Path(str, enum.Enum):
    CSI = "csi"
    ICD = "icd"
    CSD = "csd"


ALL_PATHS: FrozenSet[Path] = frozenset(Path)


class NetworkConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    blocks: int = Field(16, ge=1, description="Number of MAMBs (R)")
    channels: int = Field(64, ge=1, description="Feature channels (C)")
    scale: Literal[2, 3, 4] = Field(2, description="Upscaling factor")
    paths: FrozenSet[Path] = Field(ALL_PATHS, description="Enabled modulation paths")
    csi_stat: PoolStatistic = Field(PoolStatistic.STDVAR, description="Channel statistic for the CSI map")
    icd_stat: PoolStatistic = Field(PoolStatistic.STDVAR, description="Channel statistic fed to the ICD layers")
    reduction: int = Field(16, ge=1, description="ICD channel reduction ratio")
    eps: float = Field(ops.STANDARDIZE_EPS, gt=0, description="Standardization epsilon")

    @model_validator(mode="after")
    def _check_statistics(self):
        if self.csi_stat is PoolStatistic.MAX_AVG:
            raise ValueError("maxavg can only feed the ICD path, not CSI")
        if Path.ICD in self.paths and self.channels % self.reduction:
            raise ValueError(f"channels ({self.channels}) must be divisible by the ICD reduction ({self.reduction})")
        return self

    @field_serializer("paths")
    def _serialize_paths(self, paths: FrozenSet[Path]) -> List[str]:
        return sorted(path.value for path in paths)

    @property
    def hidden(self) -> int:
        return self.channels // self.reduction

    @property
    def stages(self) -> Tuple[int, ...]:
        return UPSCALE_STAGES[self.scale]

    def with_paths(self, paths) -> "NetworkConfig":
        return NetworkConfig(**{**self.model_dump(), "paths": frozenset(paths)})


def param_shapes(cfg: NetworkConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Ordered (name, shape) list of every parameter tensor of the network."""
    c = cfg.channels
    shapes = [("head.kernel", (c, IMAGE_CHANNELS, 3, 3)), ("head.bias", (c,))]
    for r in range(cfg.blocks):
        prefix = f"blocks.{r}"
        shapes += [
            (f"{prefix}.conv1.kernel", (c, c, 3, 3)), (f"{prefix}.conv1.bias", (c,)),
            (f"{prefix}.conv2.kernel", (c, c, 3, 3)), (f"{prefix}.conv2.bias", (c,)),
        ]
        if Path.ICD in cfg.paths:
            shapes += [
                (f"{prefix}.icd_fc1.weight", (cfg.hidden, c)), (f"{prefix}.icd_fc1.bias", (cfg.hidden,)),
                (f"{prefix}.icd_fc2.weight", (c, cfg.hidden)), (f"{prefix}.icd_fc2.bias", (c,)),
            ]
        if Path.CSD in cfg.paths:
            shapes += [(f"{prefix}.csd.kernel", (c, 3, 3)), (f"{prefix}.csd.bias", (c,))]
    shapes += [("feat.kernel", (c, c, 3, 3)), ("feat.bias", (c,))]
    for i, r in enumerate(cfg.stages):
        shapes += [(f"up.{i}.kernel", (r * r * c, c, 3, 3)), (f"up.{i}.bias", (r * r * c,))]
    shapes += [("recon.kernel", (IMAGE_CHANNELS, c, 3, 3)), ("recon.bias", (IMAGE_CHANNELS,))]
    return shapes


def count_params(cfg: NetworkConfig) -> int:
    return sum(math.prod(shape) for _, shape in param_shapes(cfg))


def param_increase_pct(cfg: NetworkConfig) -> float:
    """Parameter increase over the no-path baseline as the ablation table reports it.

    Each enabled path's share of the baseline is rounded to 0.01 % and the
    shares are summed (ICD 0.68 + CSD 0.75 = 1.43 for R16C64 x2).
    """
    base = count_params(cfg.with_paths(()))
    total = 0.0
    for path in sorted(cfg.paths, key=lambda p: p.value):
        share = count_params(cfg.with_paths({path})) - base
        total += round(100.0 * share / base, 2)
    return round(total, 2)


def param_increase_exact_pct(cfg: NetworkConfig) -> float:
    base = count_params(cfg.with_paths(()))
    return 100.0 * (count_params(cfg) - base) / base


TABLE_COMBINATIONS = (
    ("Baseline", ()),
    ("CSI", (Path.CSI,)),
    ("ICD", (Path.ICD,)),
    ("CSD", (Path.CSD,)),
    ("CSI+ICD", (Path.CSI, Path.ICD)),
    ("CSI+CSD", (Path.CSI, Path.CSD)),
    ("ICD+CSD", (Path.ICD, Path.CSD)),
    ("CSI+ICD+CSD", (Path.CSI, Path.ICD, Path.CSD)),
)


@dataclass
class ParamRow:
    """One table row; the numeric fields are None when the combination is not buildable."""
    label: str
    count: Optional[int]
    count_k: Optional[int]
    increase_pct: Optional[float]
    increase_exact_pct: Optional[float]


def param_table(cfg: NetworkConfig) -> List[ParamRow]:
    """Parameter accounting for all eight path combinations of cfg's R, C and scale."""
    rows = []
    for label, paths in TABLE_COMBINATIONS:
        # ICD rows need channels divisible by the reduction
        if Path.ICD in paths and cfg.channels % cfg.reduction:
            rows.append(ParamRow(label, None, None, None, None))
            continue
        variant = cfg.with_paths(paths)
        count = count_params(variant)
        rows.append(ParamRow(label, count, round(count / 1000),
                             param_increase_pct(variant), param_increase_exact_pct(variant)))
    return rows


@dataclass
class ModelParams:
    """Ordered named parameter tensors plus matching gradient buffers."""
    values: Dict[str, np.ndarray]
    grads: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.grads:
            self.grads = {name: np.zeros_like(value) for name, value in self.values.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def names(self) -> List[str]:
        return list(self.values)

    def count(self) -> int:
        return sum(value.size for value in self.values.values())

    def zero_grad(self):
        for grad in self.grads.values():
            grad.fill(0)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({name: np.array(value, dtype=dtype) for name, value in self.values.items()})

    def conv(self, prefix: str) -> ConvParams:
        return ConvParams(self.values[f"{prefix}.kernel"], self.values[f"{prefix}.bias"])

    def dense(self, prefix: str) -> DenseParams:
        return DenseParams(self.values[f"{prefix}.weight"], self.values[f"{prefix}.bias"])

    def accumulate(self, prefix: str, grads):
        for name, grad in grads._asdict().items():
            self.grads[f"{prefix}.{name}"] += grad


def init_params(cfg: NetworkConfig, seed: int, dtype=ops.DEFAULT_DTYPE) -> ModelParams:
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases; deterministic in seed."""
    rng = np.random.default_rng(seed)
    values = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(".bias"):
            values[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = math.prod(shape[1:])
            values[name] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)
    return ModelParams(values)


@dataclass
class BlockMaps:
    """Modulation maps of one block; None for a disabled path."""
    csi: Optional[np.ndarray]  # (N, C) as added into the gate
    csi_raw: Optional[np.ndarray]  # (N, C) pooled statistic before standardization
    icd: Optional[np.ndarray]  # (N, C)
    csd: Optional[np.ndarray]  # (N, C, H, W)
    gate: Optional[np.ndarray]  # (N, C, H, W), None for a plain residual block


ModulationMaps = List[BlockMaps]


@dataclass
class IcdFeed:
    stat: PoolStatistic
    pooled: np.ndarray
    hidden_pre: np.ndarray
    out: np.ndarray


@dataclass
class BlockCache:
    f_in: np.ndarray
    h1: np.ndarray
    a1: np.ndarray
    x: np.ndarray
    csi: Optional[np.ndarray] = None
    icd_feeds: List[IcdFeed] = field(default_factory=list)
    csd: Optional[np.ndarray] = None
    gate: Optional[np.ndarray] = None

    @property
    def icd(self) -> Optional[np.ndarray]:
        if not self.icd_feeds:
            return None
        return sum(feed.out for feed in self.icd_feeds)


def _icd_stats(cfg: NetworkConfig) -> Tuple[PoolStatistic, ...]:
    if cfg.icd_stat is PoolStatistic.MAX_AVG:
        return PoolStatistic.MAX, PoolStatistic.AVG
    return (cfg.icd_stat,)


def icd_path(csi_vec: np.ndarray, fc1: DenseParams, fc2: DenseParams) -> np.ndarray:
    """M_icd = W2 relu(W1 v) with biases; no sigmoid here, the gate applies it to the path sum."""
    return ops.dense(ops.activation(ops.dense(csi_vec, fc1), Activation.RELU), fc2)


def _block_forward(f_in: np.ndarray, params: ModelParams, r: int, cfg: NetworkConfig) -> Tuple[np.ndarray, BlockCache]:
    if f_in.ndim != 4 or f_in.shape[1] != cfg.channels:
        raise ShapeError(f"block input must have {cfg.channels} channels, got shape {f_in.shape}")
    prefix = f"blocks.{r}"
    h1 = ops.conv2d(f_in, params.conv(f"{prefix}.conv1"))
    a1 = ops.activation(h1, Activation.RELU)
    x = ops.conv2d(a1, params.conv(f"{prefix}.conv2"))
    cache = BlockCache(f_in, h1, a1, x)

    if not cfg.paths:
        return f_in + x, cache

    n, c, h, w = x.shape
    z = np.zeros((n, c, 1, 1), dtype=x.dtype)
    if Path.CSI in cfg.paths:
        cache.csi = ops.global_pool(x, cfg.csi_stat, cfg.eps)
        z = z + cache.csi[:, :, None, None]
    if Path.ICD in cfg.paths:
        fc1, fc2 = params.dense(f"{prefix}.icd_fc1"), params.dense(f"{prefix}.icd_fc2")
        for stat in _icd_stats(cfg):
            pooled = ops.global_pool(x, stat, cfg.eps)
            # fc1 pre-activation kept for the ReLU backward pass
            cache.icd_feeds.append(IcdFeed(stat, pooled, ops.dense(pooled, fc1), icd_path(pooled, fc1, fc2)))
        z = z + cache.icd[:, :, None, None]
    if Path.CSD in cfg.paths:
        cache.csd = ops.depthwise_conv2d(x, params[f"{prefix}.csd.kernel"], params[f"{prefix}.csd.bias"])
        z = z + cache.csd

    cache.gate = ops.activation(z, Activation.SIGMOID)
    return f_in + cache.gate * x, cache


def _block_maps(cache: BlockCache, cfg: NetworkConfig) -> BlockMaps:
    csi_raw = None
    if cache.csi is not None:
        raw_stat = PoolStatistic.VAR if cfg.csi_stat is PoolStatistic.STDVAR else cfg.csi_stat
        csi_raw = ops.global_pool(cache.x, raw_stat, cfg.eps)
    gate = None if cache.gate is None else np.broadcast_to(cache.gate, cache.x.shape).copy()
    return BlockMaps(cache.csi, csi_raw, cache.icd, cache.csd, gate)


def mamb_forward(f_in: np.ndarray, params: ModelParams, r: int, cfg: NetworkConfig,
                 capture: bool = False) -> Tuple[np.ndarray, Optional[BlockMaps]]:
    """Run block r on f_in; with capture set, also return its modulation maps."""
    out, cache = _block_forward(f_in, params, r, cfg)
    return out, (_block_maps(cache, cfg) if capture else None)


def mamb_backward(grad_out: np.ndarray, cache: BlockCache, params: ModelParams, r: int, cfg: NetworkConfig) -> np.ndarray:
    """Accumulate block r's parameter gradients and return the gradient w.r.t. its input."""
    prefix = f"blocks.{r}"
    x = cache.x

    if cache.gate is None:
        grad_x = grad_out
    else:
        grad_x = grad_out * cache.gate
        gate = cache.gate
        grad_z = grad_out * x * gate * (1 - gate)
        grad_vec = grad_z.sum(axis=(2, 3))

        if Path.CSD in cfg.paths:
            gx, gk, gb = ops.depthwise_conv2d_backward(x, params[f"{prefix}.csd.kernel"], params[f"{prefix}.csd.bias"], grad_z)
            grad_x = grad_x + gx
            params.grads[f"{prefix}.csd.kernel"] += gk
            params.grads[f"{prefix}.csd.bias"] += gb
        if Path.CSI in cfg.paths:
            grad_x = grad_x + ops.global_pool_backward(x, cfg.csi_stat, grad_vec, cfg.eps)
        if Path.ICD in cfg.paths:
            fc1, fc2 = params.dense(f"{prefix}.icd_fc1"), params.dense(f"{prefix}.icd_fc2")
            for feed in cache.icd_feeds:
                hidden = ops.activation(feed.hidden_pre, Activation.RELU)
                grad_hidden, grads_fc2 = ops.dense_backward(hidden, fc2, grad_vec)
                grad_pre = ops.activation_backward(feed.hidden_pre, Activation.RELU, grad_hidden)
                grad_pooled, grads_fc1 = ops.dense_backward(feed.pooled, fc1, grad_pre)
                params.accumulate(f"{prefix}.icd_fc2", grads_fc2)
                params.accumulate(f"{prefix}.icd_fc1", grads_fc1)
                grad_x = grad_x + ops.global_pool_backward(x, feed.stat, grad_pooled, cfg.eps)

    grad_a1, grads_conv2 = ops.conv2d_backward(cache.a1, params.conv(f"{prefix}.conv2"), grad_x)
    grad_h1 = ops.activation_backward(cache.h1, Activation.RELU, grad_a1)
    grad_in, grads_conv1 = ops.conv2d_backward(cache.f_in, params.conv(f"{prefix}.conv1"), grad_h1)
    params.accumulate(f"{prefix}.conv2", grads_conv2)
    params.accumulate(f"{prefix}.conv1", grads_conv1)
    return grad_out + grad_in


@dataclass
class NetworkCache:
    img: np.ndarray
    blocks: List[BlockCache]
    f_r: np.ndarray
    up_inputs: List[np.ndarray]
    recon_in: np.ndarray


def network_forward_cached(img_lr: np.ndarray, params: ModelParams, cfg: NetworkConfig) -> Tuple[np.ndarray, NetworkCache]:
    if img_lr.ndim != 4 or img_lr.shape[1] != IMAGE_CHANNELS:
        raise ShapeError(f"network input must be (N, {IMAGE_CHANNELS}, H, W), got {img_lr.shape}")
    f0 = ops.conv2d(img_lr, params.conv("head"))

    feats, blocks = f0, []
    for r in range(cfg.blocks):
        feats, block_cache = _block_forward(feats, params, r, cfg)
        blocks.append(block_cache)

    # global skip
    up, up_inputs = f0 + ops.conv2d(feats, params.conv("feat")), []
    for i, r in enumerate(cfg.stages):
        up_inputs.append(up)
        up = ops.pixel_shuffle(ops.conv2d(up, params.conv(f"up.{i}")), r)

    out = ops.conv2d(up, params.conv("recon"))
    return out, NetworkCache(img_lr, blocks, feats, up_inputs, up)


def network_forward(img_lr: np.ndarray, params: ModelParams, cfg: NetworkConfig) -> np.ndarray:
    """Mean-subtracted (N, 3, H, W) LR batch -> (N, 3, scale*H, scale*W) SR batch."""
    return network_forward_cached(img_lr, params, cfg)[0]


def network_backward(grad_out: np.ndarray, cache: NetworkCache, params: ModelParams, cfg: NetworkConfig) -> np.ndarray:
    """Accumulate every parameter gradient into params.grads; returns the gradient w.r.t. the input image."""
    grad, grads = ops.conv2d_backward(cache.recon_in, params.conv("recon"), grad_out)
    params.accumulate("recon", grads)
    for i in reversed(range(len(cfg.stages))):
        grad_conv = ops.pixel_shuffle_backward(grad, cfg.stages[i])
        grad, grads = ops.conv2d_backward(cache.up_inputs[i], params.conv(f"up.{i}"), grad_conv)
        params.accumulate(f"up.{i}", grads)

    grad_feat = grad
    grad, grads = ops.conv2d_backward(cache.f_r, params.conv("feat"), grad_feat)
    params.accumulate("feat", grads)
    for r in reversed(range(cfg.blocks)):
        grad = mamb_backward(grad, cache.blocks[r], params, r, cfg)

    grad_img, grads = ops.conv2d_backward(cache.img, params.conv("head"), grad + grad_feat)
    params.accumulate("head", grads)
    return grad_img


def capture_maps(img_lr: np.ndarray, params: ModelParams, cfg: NetworkConfig) -> ModulationMaps:
    """Run the network on img_lr and return every block's modulation maps."""
    _, cache = network_forward_cached(img_lr, params, cfg)
    return [_block_maps(block, cfg) for block in cache.blocks]
