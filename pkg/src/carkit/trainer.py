"""Training loop: patch sampling, Adam, plateau decay, validation, checkpoints."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint
from .image import flip
from .losses import LossWeights
from .metrics import psnr
from .models import Topology
from .pipeline import CARModel
from .quantizer import QuantizerConfig
from .resampler import ResampleGeometry

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: Checkpoint):
        super().__init__(message)
        self.last_good = last_good


REQUIRED_KEYS = ("scale", "lam", "gamma")


@dataclass
class TrainConfig:
    scale: int
    lam: float
    gamma: float
    eta: float = 1.0
    eta_inside_sqrt: bool = False
    alpha: float = 0.5
    quantize: bool = True
    patch_size: int | None = None
    batch_size: int = 16
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    patience: int = 100
    decay: float = 0.5
    epochs: int = 1
    max_steps: int | None = None
    val_interval: int = 1
    upscaler: str = "bicubic"
    use_offsets: bool = True
    seed: int = 0
    dtype: str = "float64"
    kernel_size: int | None = None
    offset_cap: float = 3.0
    normalization: str = "softmax"
    topology: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.patch_size is None:
            self.patch_size = {2: 96, 4: 192}.get(self.scale, 48 * self.scale)
        if self.kernel_size is None:
            self.kernel_size = 3 * self.scale
        if self.scale < 1:
            raise ConfigError("scale must be >= 1")
        if self.patch_size % self.scale:
            raise ConfigError(f"patch_size {self.patch_size} not divisible by scale {self.scale}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.upscaler not in ("bicubic", "learned"):
            raise ConfigError(f"upscaler must be 'bicubic' or 'learned', got {self.upscaler!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        unknown = set(self.topology) - {f.name for f in fields(Topology)}
        if unknown:
            raise ConfigError(f"unknown topology keys: {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        for key in REQUIRED_KEYS:
            if key not in d:
                raise ConfigError(f"missing required config key {key!r}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def geometry(self) -> ResampleGeometry:
        return ResampleGeometry(self.scale, self.kernel_size, self.kernel_size,
                                offset_cap=self.offset_cap, normalization=self.normalization)

    def weights(self) -> LossWeights:
        return LossWeights(self.lam, self.gamma, self.eta, self.eta_inside_sqrt)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-6) -> bool:
    """Bias-corrected Adam update, in place.

    Returns False (and leaves everything untouched) if any gradient is
    non-finite.
    """
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
        if not np.all(np.isfinite(g)):
            return False
    b1, b2 = betas
    state.t += 1
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return True


def sample_minibatch(dataset: list[np.ndarray], cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Random patches with independent horizontal/vertical flips, drawn with replacement."""
    p = cfg.patch_size
    out = np.empty((cfg.batch_size, p, p, 3))
    for b in range(cfg.batch_size):
        img = dataset[rng.integers(len(dataset))]
        H, W = img.shape[:2]
        x0 = rng.integers(H - p + 1)
        y0 = rng.integers(W - p + 1)
        patch = img[x0:x0 + p, y0:y0 + p]
        if rng.random() < 0.5:
            patch = flip(patch, "horizontal")
        if rng.random() < 0.5:
            patch = flip(patch, "vertical")
        out[b] = patch
    return out


def usable_images(images: list[np.ndarray], patch: int) -> list[np.ndarray]:
    kept = []
    for i, img in enumerate(images):
        if img.shape[0] < patch or img.shape[1] < patch:
            log.warning("skipping training image %d: %dx%d is smaller than the %d patch", i, *img.shape[:2], patch)
            continue
        kept.append(img)
    return kept


def dataset_mean(images: list[np.ndarray]) -> np.ndarray:
    total = np.zeros(3)
    count = 0
    for img in images:
        total += img.reshape(-1, 3).sum(axis=0)
        count += img.shape[0] * img.shape[1]
    return total / count


def build_model(ckpt: Checkpoint) -> CARModel:
    """Reconstruct a model from a checkpoint's geometry, topology and parameters."""
    cfg = ckpt.config
    dtype = np.dtype(cfg.get("dtype", "float64"))
    model = CARModel(ResampleGeometry.from_dict(ckpt.geometry), Topology(**ckpt.topology), ckpt.rgb_mean,
                     upscaler=cfg.get("upscaler", "bicubic"), use_offsets=cfg.get("use_offsets", True),
                     quant=QuantizerConfig(cfg.get("alpha", 0.5), cfg.get("quantize", True)), dtype=dtype)
    for name, p in model.all_named_params():
        if name in ckpt.params:
            p.value[...] = ckpt.params[name]
    return model


def model_params(model: CARModel) -> dict[str, np.ndarray]:
    return {k: p.value for k, p in model.all_named_params()}


class Trainer:
    def __init__(self, cfg: TrainConfig, train_set: list[np.ndarray], val_set: list[np.ndarray] | None = None,
                 resume: Checkpoint | None = None, on_record: Callable[[dict], None] | None = None):
        self.cfg = cfg
        self.train_set = usable_images(train_set, cfg.patch_size)
        if not self.train_set:
            raise ValueError("no usable training images")
        self.val_set = [v[:v.shape[0] - v.shape[0] % cfg.scale, :v.shape[1] - v.shape[1] % cfg.scale]
                        for v in (val_set or [])]
        self.on_record = on_record or (lambda rec: None)
        self.weights = cfg.weights()
        topo = Topology(**cfg.topology)
        mean = resume.rgb_mean if resume is not None else dataset_mean(self.train_set)
        self.model = CARModel(cfg.geometry(), topo, mean, upscaler=cfg.upscaler, use_offsets=cfg.use_offsets,
                              quant=QuantizerConfig(cfg.alpha, cfg.quantize), seed=cfg.seed, dtype=np.dtype(cfg.dtype))
        self.rng = np.random.default_rng(cfg.seed)
        self.adam = AdamState()
        self.lr = cfg.lr
        self.step_count = 0
        self.epoch = 0
        self.best_val = None
        self.stale = 0
        self.rejected_steps = 0
        if resume is not None:
            self._restore(resume)
        self.best_params = copy.deepcopy(self._param_dict())
        self.last_good = None

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.train_set) / self.cfg.batch_size)

    def _param_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self.model.named_params()}

    def _restore(self, c: Checkpoint):
        for name, p in self.model.all_named_params():
            if name in c.params:
                p.value[...] = c.params[name]
        self.adam = AdamState({k: v.copy() for k, v in c.adam_m.items()},
                              {k: v.copy() for k, v in c.adam_v.items()}, c.adam_t)
        self.lr = c.lr
        self.step_count = c.step
        self.epoch = c.epoch
        self.best_val = c.best_val_psnr
        self.stale = c.stale_epochs
        if c.rng_state is not None:
            self.rng.bit_generator.state = c.rng_state

    def checkpoint(self, params: dict[str, np.ndarray] | None = None) -> Checkpoint:
        """Snapshot of the current training state (or of ``params`` with the current optimiser state)."""
        snapshot = {k: v.copy() for k, v in model_params(self.model).items()}
        if params is not None:
            snapshot.update({k: v.copy() for k, v in params.items()})
        return Checkpoint(
            geometry=self.model.geom.to_dict(), topology=self.model.topo.to_dict(), config=self.cfg.to_dict(),
            rgb_mean=[float(x) for x in self.model.rgb_mean],
            params=snapshot,
            adam_m={k: v.copy() for k, v in self.adam.m.items()}, adam_v={k: v.copy() for k, v in self.adam.v.items()},
            adam_t=self.adam.t, lr=self.lr, step=self.step_count, epoch=self.epoch, best_val_psnr=self.best_val,
            stale_epochs=self.stale, rng_state=self.rng.bit_generator.state,
        )

    def best_checkpoint(self) -> Checkpoint:
        return self.checkpoint(self.best_params)

    def step(self) -> dict:
        batch = sample_minibatch(self.train_set, self.cfg, self.rng)
        self.model.zero_grad()
        terms = self.model.loss_and_grad(batch, self.weights)
        if not math.isfinite(terms["loss"]):
            raise TrainingDiverged(f"loss became {terms['loss']} at step {self.step_count}", self.checkpoint())
        named = self.model.named_params()
        ok = adam_step({k: p.value for k, p in named}, {k: p.grad for k, p in named}, self.adam, self.lr,
                       (self.cfg.beta1, self.cfg.beta2), self.cfg.eps)
        if not ok:
            self.rejected_steps += 1
            log.warning("non-finite gradient at step %d; update rejected", self.step_count)
        self.step_count += 1
        rec = {"step": self.step_count, "epoch": self.epoch, "lr": self.lr, **terms, "rejected": not ok}
        self.on_record(rec)
        return rec

    def validate(self) -> float:
        scores = []
        for hr in self.val_set:
            lr = self.model.downscale(hr, quantize=True)
            sr = self.model.upscale(lr)
            scores.append(psnr(hr, np.asarray(sr, dtype=np.float64)))
        return float(np.mean(scores))

    def end_epoch(self):
        self.epoch += 1
        if not self.val_set or self.epoch % self.cfg.val_interval:
            return
        score = self.validate()
        if self.best_val is None or score > self.best_val:
            self.best_val = score
            self.stale = 0
            self.best_params = copy.deepcopy(self._param_dict())
        else:
            self.stale += 1
            if self.stale >= self.cfg.patience:
                self.lr *= self.cfg.decay
                self.stale = 0
        self.on_record({"epoch": self.epoch, "val_psnr": score, "best_val_psnr": self.best_val, "lr": self.lr})

    def run(self) -> Checkpoint:
        for _ in range(self.cfg.epochs):
            for _ in range(self.steps_per_epoch):
                if self.cfg.max_steps is not None and self.step_count >= self.cfg.max_steps:
                    return self.best_checkpoint()
                self.step()
            self.end_epoch()
        return self.best_checkpoint()


def train(cfg: TrainConfig, train_set: list[np.ndarray], val_set: list[np.ndarray] | None = None,
          on_record: Callable[[dict], None] | None = None) -> Checkpoint:
    """Train from scratch and return the best-validation checkpoint."""
    return Trainer(cfg, train_set, val_set, on_record=on_record).run()


def identity_checkpoint(channels_topology: dict | None = None) -> Checkpoint:
    """Scale-1 checkpoint whose kernels are exact deltas and offsets zero.

    Uses a 2x2 kernel so the tap at index (1, 1) sits exactly on the pixel
    centre; the other logits are low enough for softmax to give them weight
    exactly 0 in floating point.
    """
    cfg = TrainConfig(scale=1, lam=0.0, gamma=0.0, kernel_size=2, patch_size=2, topology=channels_topology or {})
    model = CARModel(cfg.geometry(), Topology(**cfg.topology), (0.5, 0.5, 0.5))
    for name, p in model.all_named_params():
        if name.startswith("resampler.kernel_head.out") or name.startswith("resampler.offset_head.out"):
            p.value[...] = 0
    bias = dict(model.all_named_params())["resampler.kernel_head.out.bias"]
    bias.value[...] = [-1e3, -1e3, -1e3, 0.0]
    return Checkpoint(geometry=model.geom.to_dict(), topology=model.topo.to_dict(), config=cfg.to_dict(),
                      rgb_mean=[0.5, 0.5, 0.5], params=model_params(model))

