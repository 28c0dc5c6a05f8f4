"""
Training: patch sampling with dihedral augmentation, L1 loss, Adam and a
step-halving learning-rate schedule.

Image values are in [0, 1]. The per-channel training mean is subtracted from
both the LR input and the HR target, so the network regresses zero-mean
images and the mean is re-added before any metric is computed.
"""
import csv
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from mamsr.checkpoint import save_checkpoint
from mamsr.image_io import DatasetError, downscale, list_pngs, load_png, modcrop
from mamsr.model import ModelParams, NetworkConfig, network_backward, network_forward_cached

PREFETCH_DEPTH = 4

# (quarter turns, horizontal flip): the 8-element dihedral group, identity first
AUGMENTATIONS: Tuple[Tuple[int, bool], ...] = tuple((rot, flip) for flip in (False, True) for rot in range(4))


class PatchSizeError(DatasetError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class TrainConfig(BaseModel):
    batch: int = Field(16, ge=1, description="Patches per mini-batch")
    patch_lr: int = Field(48, ge=1, description="LR patch side in pixels")
    lr0: float = Field(1e-4, gt=0, description="Initial learning rate")
    halve_every: int = Field(200_000, ge=1, description="Iterations between learning-rate halvings")
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)
    max_iters: int = Field(1000, ge=0)
    seed: int = 0
    log_every: int = Field(100, ge=1)
    val_every: int = Field(10_000, ge=1)
    ckpt_every: int = Field(10_000, ge=1)
    prefetch: bool = Field(False, description="Assemble batches on a producer thread")


@dataclass
class TrainingPair:
    name: str
    lr: np.ndarray  # (h, w, 3)
    hr: np.ndarray  # (h * scale, w * scale, 3)


@dataclass
class TrainingSet:
    pairs: List[TrainingPair]
    scale: int
    rgb_mean: np.ndarray


def compute_rgb_mean(images: Sequence[np.ndarray]) -> np.ndarray:
    """Per-channel mean over every pixel of every image (larger images weigh more)."""
    if len(images) == 0:
        raise ValueError("cannot compute the RGB mean of an empty image set")
    total = np.zeros(3)
    pixels = 0
    for img in images:
        flat = img.reshape(-1, 3)
        total += flat.sum(axis=0, dtype=np.float64)
        pixels += flat.shape[0]
    return total / pixels


def load_training_set(hr_dir, scale: int, lr_dir=None) -> TrainingSet:
    """HR PNGs from hr_dir; LR images from lr_dir (same file names) or bicubic-downscaled."""
    hr_dir = Path(hr_dir)
    if not hr_dir.is_dir():
        raise DatasetError(f"{hr_dir}: not a directory")
    paths = list_pngs(hr_dir)
    if not paths:
        raise DatasetError(f"{hr_dir}: no PNG images")

    pairs = []
    for path in paths:
        hr = modcrop(load_png(path), scale)
        if lr_dir is None:
            lr = downscale(hr, scale)
        else:
            lr = load_png(Path(lr_dir) / path.name)
            if lr.shape[0] * scale != hr.shape[0] or lr.shape[1] * scale != hr.shape[1]:
                raise DatasetError(f"{path.name}: LR {lr.shape[1]}x{lr.shape[0]} does not match HR "
                                   f"{hr.shape[1]}x{hr.shape[0]} at x{scale}")
        pairs.append(TrainingPair(path.name, lr, hr))
    print(f"📄 Loaded {len(pairs)} training pairs from {hr_dir}")
    return TrainingSet(pairs, scale, compute_rgb_mean([pair.hr for pair in pairs]))


def augment(img: np.ndarray, rot: int, flip: bool) -> np.ndarray:
    out = np.rot90(img, rot, axes=(0, 1))
    return out[:, ::-1] if flip else out


def sample_batch(dataset: TrainingSet, cfg: TrainConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Random aligned LR/HR patches, identically augmented, mean-subtracted, as NCHW float32."""
    p, s = cfg.patch_lr, dataset.scale
    lr_batch = np.empty((cfg.batch, 3, p, p), dtype=np.float32)
    hr_batch = np.empty((cfg.batch, 3, p * s, p * s), dtype=np.float32)
    mean = dataset.rgb_mean.astype(np.float32)

    for b in range(cfg.batch):
        pair = dataset.pairs[rng.integers(len(dataset.pairs))]
        h, w = pair.lr.shape[:2]
        if h < p or w < p:
            raise PatchSizeError(f"{pair.name}: LR image {w}x{h} is smaller than the {p}x{p} patch")
        y, x = rng.integers(0, h - p + 1), rng.integers(0, w - p + 1)
        rot, flip = AUGMENTATIONS[rng.integers(len(AUGMENTATIONS))]

        lr = augment(pair.lr[y:y + p, x:x + p], rot, flip)
        hr = augment(pair.hr[y * s:(y + p) * s, x * s:(x + p) * s], rot, flip)
        lr_batch[b] = (lr - mean).transpose(2, 0, 1)
        hr_batch[b] = (hr - mean).transpose(2, 0, 1)
    return lr_batch, hr_batch


class BatchProducer:
    """Single producer thread filling a bounded queue; batches arrive in the same order as inline sampling."""

    _DONE = object()

    def __init__(self, dataset: TrainingSet, cfg: TrainConfig, count: int):
        self._queue: "queue.Queue" = queue.Queue(maxsize=PREFETCH_DEPTH)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, args=(dataset, cfg, count), daemon=True)
        self._thread.start()

    def _run(self, dataset: TrainingSet, cfg: TrainConfig, count: int):
        rng = np.random.default_rng(cfg.seed)
        try:
            for _ in range(count):
                item = sample_batch(dataset, cfg, rng)
                while not self._stop.is_set():
                    try:
                        self._queue.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if self._stop.is_set():
                    return
        except Exception as e:
            self._queue.put(e)
            return
        self._queue.put(self._DONE)

    def __iter__(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        while True:
            item = self._queue.get()
            if item is self._DONE:
                return
            if isinstance(item, Exception):
                raise item
            yield item

    def close(self):
        self._stop.set()
        while self._thread.is_alive():
            try:
                self._queue.get(timeout=0.1)
            except queue.Empty:
                pass
        self._thread.join()


def _inline_batches(dataset: TrainingSet, cfg: TrainConfig, count: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng(cfg.seed)
    for _ in range(count):
        yield sample_batch(dataset, cfg, rng)


def l1_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean absolute error and its gradient w.r.t. pred (sign(0) = 0)."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    diff = pred - target
    loss = float(np.mean(np.abs(diff), dtype=np.float64))
    return loss, (np.sign(diff) / diff.size).astype(pred.dtype)


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, in place on params and state."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k} at step {state.t + 1}")

    state.t += 1
    # bias corrections once per step
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    step_size = lr / bc1

    for k in params:
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        denom = np.sqrt(v * (1.0 / bc2)) + eps
        params[k] -= (step_size * m / denom).astype(params[k].dtype)


def lr_at(iteration: int, lr0: float = 1e-4, halve_every: int = 200_000) -> float:
    return lr0 * 0.5 ** (iteration // halve_every)


@dataclass
class LogRecord:
    iteration: int
    lr: float
    l1_loss: float
    val_psnr: Optional[float] = None

    def csv_row(self) -> List[str]:
        row = [str(self.iteration), f"{self.lr:.6g}", f"{self.l1_loss:.6f}"]
        if self.val_psnr is not None:
            row.append(f"{self.val_psnr:.4f}")
        return row


@dataclass
class TrainHooks:
    validate: Optional[Callable[[ModelParams], float]] = None
    on_record: Optional[Callable[[LogRecord], None]] = None


@dataclass
class TrainResult:
    params: ModelParams
    records: List[LogRecord] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)


def train(params: ModelParams, net_cfg: NetworkConfig, dataset: TrainingSet, cfg: TrainConfig,
          out_dir=None, hooks: Optional[TrainHooks] = None) -> TrainResult:
    """
    Run cfg.max_iters steps of sample -> forward -> L1 -> backward -> Adam.

    With out_dir set, writes train_log.csv and refreshes last.ckpt every
    cfg.ckpt_every iterations and at the end. A non-finite loss raises
    NonFiniteError before anything is saved, so last.ckpt stays the last good state.
    """
    if dataset.scale != net_cfg.scale:
        raise ValueError(f"dataset scale x{dataset.scale} does not match network scale x{net_cfg.scale}")
    hooks = hooks or TrainHooks()
    result = TrainResult(params)
    state = AdamState.zeros_like(params.values)
    out_dir = None if out_dir is None else Path(out_dir)
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.csv", "w", newline="")
    log_writer = csv.writer(log_file) if log_file else None

    producer = BatchProducer(dataset, cfg, cfg.max_iters) if cfg.prefetch else None
    batches = iter(producer) if producer else _inline_batches(dataset, cfg, cfg.max_iters)
    window: List[float] = []
    print(f"🚀 Training {params.count():,} parameters for {cfg.max_iters} iterations")
    try:
        for it, (lr_batch, hr_batch) in enumerate(batches):
            pred, cache = network_forward_cached(lr_batch, params, net_cfg)
            loss, grad = l1_loss(pred, hr_batch)
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at iteration {it}")

            params.zero_grad()
            network_backward(grad, cache, params, net_cfg)
            rate = lr_at(it, cfg.lr0, cfg.halve_every)
            adam_step(params.values, params.grads, state, rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
            result.losses.append(loss)
            window.append(loss)

            done = it + 1
            val_psnr = None
            if hooks.validate is not None and done % cfg.val_every == 0:
                val_psnr = hooks.validate(params)
            if it == 0 or done % cfg.log_every == 0 or done == cfg.max_iters or val_psnr is not None:
                record = LogRecord(it, rate, float(np.mean(window)), val_psnr)
                window = []
                result.records.append(record)
                if log_writer:
                    log_writer.writerow(record.csv_row())
                    log_file.flush()
                if hooks.on_record:
                    hooks.on_record(record)
                extra = "" if val_psnr is None else f"  val {val_psnr:.2f} dB"
                print(f"⏳ iter {it:>7}  lr {rate:.2e}  l1 {record.l1_loss:.5f}{extra}")
            if out_dir is not None and (done % cfg.ckpt_every == 0 or done == cfg.max_iters):
                save_checkpoint(params, net_cfg, out_dir / "last.ckpt", dataset.rgb_mean)
    finally:
        if producer:
            producer.close()
        if log_file:
            log_file.close()

    print(f"✅ Training finished after {len(result.losses)} iterations")
    return result
