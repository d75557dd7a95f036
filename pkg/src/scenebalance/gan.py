"""Adversarial scene-feature learner.

The generator maps uniform noise to images through seven transposed-conv
blocks (C1..C7); the discriminator scores images through seven conv blocks
(C8..C14) plus a dense sigmoid head. Scene features are read from the last
three discriminator blocks, pooled to a common grid and concatenated.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .nn import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Flatten,
    LeakyReLU,
    Linear,
    OptimizerState,
    ReLU,
    Sequential,
    ShapeError,
    Tanh,
    adam,
    concat_flatten,
    maxpool,
    optimizer_step,
)
from .nn.functional import sigmoid

log = logging.getLogger(__name__)

CLAMP_EPS = 1e-7
LOSS_MODES = ("saturating", "non-saturating")
# indices of C12, C13, C14 inside the discriminator block list
TAP_BLOCKS = (4, 5, 6)


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"training aborted at step {step}: {message}")
        self.step = step


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GanConfig:
    image_size: int = 256
    image_channels: int = 3
    noise_dim: int = 100
    # spatial extent of the C14 map; C13 and C12 sit at 2x and 4x this
    feature_size: int = 4
    generator_channels: Tuple[int, ...] = (1024, 512, 256, 128, 64, 32)  # C1..C6; C7 = image_channels
    discriminator_channels: Tuple[int, ...] = (32, 64, 128, 256, 256, 512, 1024)  # C8..C14
    g_loss_mode: str = "non-saturating"
    batch_size: int = 64
    epochs: int = 25
    seed: int = 0
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_norm: bool = True
    leaky_slope: float = 0.2
    init_std: float = 0.02

    def __post_init__(self):
        if self.noise_dim < 1:
            raise ValueError("noise_dim must be >= 1")
        if self.image_size < 16 or not _is_pow2(self.image_size):
            raise ValueError(f"image_size must be a power of two >= 16, got {self.image_size}")
        if self.image_channels < 1:
            raise ValueError("image_channels must be >= 1")
        if not _is_pow2(self.feature_size):
            raise ValueError(f"feature_size must be a power of two, got {self.feature_size}")
        ratio = self.image_size // (4 * self.feature_size)
        if ratio < 1 or not _is_pow2(ratio) or ratio > 16 or ratio * 4 * self.feature_size != self.image_size:
            raise ValueError(
                f"image_size {self.image_size} cannot be reduced to a {4 * self.feature_size} grid by C8..C11"
            )
        if len(self.generator_channels) != 6:
            raise ValueError("generator_channels lists C1..C6 (6 entries)")
        if len(self.discriminator_channels) != 7:
            raise ValueError("discriminator_channels lists C8..C14 (7 entries)")
        if min(self.generator_channels + self.discriminator_channels) < 1:
            raise ValueError("channel counts must be positive")
        if self.g_loss_mode not in LOSS_MODES:
            raise ValueError(f"g_loss_mode must be one of {LOSS_MODES}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @classmethod
    def full_scale(cls, **overrides) -> "GanConfig":
        return replace(cls(), **overrides)

    @classmethod
    def toy(cls, **overrides) -> "GanConfig":
        base = cls(
            image_size=32,
            image_channels=1,
            feature_size=2,
            generator_channels=(128, 64, 32, 16, 8, 4),
            discriminator_channels=(4, 8, 16, 32, 32, 64, 128),
            batch_size=8,
            epochs=10,
            # at this width per-channel normalization drowns the few scene-sensitive
            # channels; plain conv features separate the scenes far more cleanly
            batch_norm=False,
        )
        return replace(base, **overrides)

    @property
    def generator_start(self) -> int:
        return max(4, self.image_size // 64)

    @property
    def feature_length(self) -> int:
        c12, c13, c14 = self.discriminator_channels[4:]
        return (c12 + c13 + c14) * self.feature_size**2


@dataclass
class FeatureVector:
    values: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"non-finite scene feature for image {self.image_id!r}")


@dataclass
class StepRecord:
    step: int
    epoch: int
    d_loss: float
    g_loss: float
    clamp_events: int = 0


@dataclass
class TrainHistory:
    records: List[StepRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, record: StepRecord) -> None:
        if not (math.isfinite(record.d_loss) and math.isfinite(record.g_loss)):
            raise TrainingAborted(record.step, "non-finite loss")
        self.records.append(record)

    @property
    def d_losses(self) -> List[float]:
        return [r.d_loss for r in self.records]

    @property
    def g_losses(self) -> List[float]:
        return [r.g_loss for r in self.records]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "d_loss", "g_loss"])
            for r in self.records:
                w.writerow([r.step, repr(r.d_loss), repr(r.g_loss)])


def _block(layers, batch_norm, channels, activation):
    out = list(layers)
    if batch_norm:
        out.append(BatchNorm2d(channels))
    out.append(activation)
    return Sequential(out)


def build_generator(config: GanConfig, rng: np.random.Generator) -> Sequential:
    std = config.init_std
    start = config.generator_start
    strided = int(math.log2(config.image_size // start))
    if strided > 6:
        raise ValueError(f"image_size {config.image_size} needs more than six upsampling blocks")
    chans = list(config.generator_channels) + [config.image_channels]
    blocks = [
        _block(
            [ConvTranspose2d(config.noise_dim, chans[0], start, 1, 0, rng=rng, std=std, name="gen.c1")],
            config.batch_norm,
            chans[0],
            ReLU(),
        )
    ]
    for i in range(1, 7):
        # stride-1 refinements run first, at the coarsest resolution
        if i <= 6 - strided:
            conv = ConvTranspose2d(chans[i - 1], chans[i], 3, 1, 1, rng=rng, std=std, name=f"gen.c{i + 1}")
        else:
            conv = ConvTranspose2d(chans[i - 1], chans[i], 4, 2, 1, rng=rng, std=std, name=f"gen.c{i + 1}")
        if i == 6:
            blocks.append(Sequential([conv, Tanh()]))
        else:
            blocks.append(_block([conv], config.batch_norm, chans[i], ReLU()))
    return Sequential(blocks)


def build_discriminator(config: GanConfig, rng: np.random.Generator) -> Sequential:
    std = config.init_std
    strided = int(math.log2(config.image_size // (4 * config.feature_size)))
    chans = [config.image_channels] + list(config.discriminator_channels)
    blocks = []
    for i in range(1, 8):
        name = f"disc.c{i + 7}"
        if i <= 4:
            # C8..C11: downsample first, then stride-1 at the C12 grid
            stride_two = i <= strided
        else:
            # C12 keeps the grid; C13, C14 halve it
            stride_two = i >= 6
        if stride_two:
            conv = Conv2d(chans[i - 1], chans[i], 4, 2, 1, rng=rng, std=std, name=name)
        else:
            conv = Conv2d(chans[i - 1], chans[i], 3, 1, 1, rng=rng, std=std, name=name)
        blocks.append(_block([conv], config.batch_norm, chans[i], LeakyReLU(config.leaky_slope)))
    head = Sequential(
        [Flatten(), Linear(chans[-1] * config.feature_size**2, 1, rng=rng, std=std, name="disc.head")]
    )
    blocks.append(head)
    return Sequential(blocks)


class GanModel:
    """Generator and discriminator networks sharing one :class:`GanConfig`."""

    def __init__(self, config: GanConfig, generator: Sequential = None, discriminator: Sequential = None):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.generator = generator if generator is not None else build_generator(config, rng)
        self.discriminator = discriminator if discriminator is not None else build_discriminator(config, rng)
        self.input_shape = (config.image_channels, config.image_size, config.image_size)

    def train(self, mode: bool = True) -> "GanModel":
        self.generator.train(mode)
        self.discriminator.train(mode)
        return self

    def eval(self) -> "GanModel":
        return self.train(False)

    def generator_params(self):
        return self.generator.parameters()

    def discriminator_params(self):
        return self.discriminator.parameters()

    def zero_grad(self) -> None:
        self.generator.zero_grad()
        self.discriminator.zero_grad()

    def checksum(self, which: str) -> str:
        net = self.generator if which == "generator" else self.discriminator
        h = hashlib.sha256()
        for p in net.parameters():
            h.update(p.weights.tobytes())
            h.update(p.biases.tobytes())
        return h.hexdigest()

    # raw passes; callers choose the train/eval mode

    def _generator_forward(self, noise: np.ndarray) -> np.ndarray:
        if noise.ndim != 2 or noise.shape[1] != self.config.noise_dim:
            raise ShapeError(f"noise must be (N, {self.config.noise_dim}), got {noise.shape}")
        return self.generator.forward(noise.reshape(noise.shape[0], -1, 1, 1))

    def _discriminator_forward(self, images: np.ndarray):
        if images.ndim != 4 or images.shape[1:] != self.input_shape:
            raise ShapeError(f"discriminator expects (N, {', '.join(map(str, self.input_shape))}), got {images.shape}")
        taps = []
        x = images
        for i, block in enumerate(self.discriminator.layers):
            x = block.forward(x)
            if i in TAP_BLOCKS:
                taps.append(x)
        return x.reshape(-1), taps


def sample_noise(count: int, config: GanConfig, seed: int) -> np.ndarray:
    """``count`` x ``noise_dim`` draws from U[-1, 1]."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, size=(count, config.noise_dim)).astype(np.float32)


def generate(model: GanModel, noise: np.ndarray) -> np.ndarray:
    model.generator.eval()
    return model._generator_forward(np.asarray(noise, dtype=np.float32))


def discriminate(model: GanModel, images: np.ndarray):
    """Return (probabilities, [C12, C13, C14] tap maps) in inference mode.

    Probabilities are float64 and kept strictly inside (0, 1).
    """
    model.discriminator.eval()
    logits, taps = model._discriminator_forward(np.asarray(images, dtype=np.float32))
    probs = np.clip(sigmoid(logits.astype(np.float64)), CLAMP_EPS, 1 - CLAMP_EPS)
    return probs, taps


def clamp_probabilities(p) -> Tuple[np.ndarray, int]:
    p = np.asarray(p, dtype=np.float64)
    clamped = np.clip(p, CLAMP_EPS, 1 - CLAMP_EPS)
    events = int(np.count_nonzero(clamped != p))
    if events:
        log.debug("clamped %d probabilities to [%g, 1-%g]", events, CLAMP_EPS, CLAMP_EPS)
    return clamped, events


def d_loss(real_probs, fake_probs) -> float:
    """-mean(log D(x)) - mean(log(1 - D(G(z)))); minimizing it maximizes the value function over D."""
    real, _ = clamp_probabilities(real_probs)
    fake, _ = clamp_probabilities(fake_probs)
    return float(-np.mean(np.log(real)) - np.mean(np.log1p(-fake)))


def g_loss(fake_probs, mode: str = "non-saturating") -> float:
    fake, _ = clamp_probabilities(fake_probs)
    if mode == "saturating":
        return float(np.mean(np.log1p(-fake)))
    if mode == "non-saturating":
        return float(-np.mean(np.log(fake)))
    raise ValueError(f"unknown g_loss mode {mode!r}")


def g_loss_logit_grad(fake_probs: np.ndarray, mode: str) -> np.ndarray:
    """d g_loss / d logit for each fake sample (sigmoid folded in)."""
    p = np.asarray(fake_probs, dtype=np.float64)
    n = p.size
    if mode == "saturating":
        return -p / n
    if mode == "non-saturating":
        return -(1 - p) / n
    raise ValueError(f"unknown g_loss mode {mode!r}")


def _backprop_logits(model: GanModel, dlogits: np.ndarray) -> np.ndarray:
    return model.discriminator.backward(dlogits.reshape(-1, 1).astype(np.float32))


def _count_clamps(*probs) -> int:
    return sum(clamp_probabilities(p)[1] for p in probs)


def discriminator_step(model: GanModel, d_opt: OptimizerState, real_batch: np.ndarray, noise: np.ndarray):
    """Update D on a real batch and fakes from a frozen G. Returns (loss, fakes, clamp events)."""
    model.train()
    fakes = model._generator_forward(noise)
    model.discriminator.zero_grad()
    real_logits, _ = model._discriminator_forward(real_batch)
    real_p = sigmoid(real_logits.astype(np.float64))
    _backprop_logits(model, -(1 - real_p) / real_p.size)
    fake_logits, _ = model._discriminator_forward(fakes)
    fake_p = sigmoid(fake_logits.astype(np.float64))
    _backprop_logits(model, fake_p / fake_p.size)
    loss = d_loss(real_p, fake_p)
    optimizer_step(model.discriminator_params(), d_opt)
    model.discriminator.zero_grad()
    return loss, fakes, _count_clamps(real_p, fake_p)


def generator_step(model: GanModel, g_opt: OptimizerState, noise: np.ndarray, fakes: np.ndarray = None):
    """Update G through a frozen D. ``fakes`` reuses the cached generator pass."""
    model.train()
    if fakes is None:
        fakes = model._generator_forward(noise)
    model.generator.zero_grad()
    logits, _ = model._discriminator_forward(fakes)
    p = sigmoid(logits.astype(np.float64))
    loss = g_loss(p, model.config.g_loss_mode)
    dfakes = _backprop_logits(model, g_loss_logit_grad(p, model.config.g_loss_mode))
    model.generator.backward(dfakes)
    optimizer_step(model.generator_params(), g_opt)
    model.zero_grad()
    return loss, _count_clamps(p)


def make_optimizers(config: GanConfig) -> Tuple[OptimizerState, OptimizerState]:
    return (
        adam(config.learning_rate, config.beta1, config.beta2),
        adam(config.learning_rate, config.beta1, config.beta2),
    )


def train_step(
    model: GanModel,
    d_opt: OptimizerState,
    g_opt: OptimizerState,
    real_batch: np.ndarray,
    seed: int,
    step: int = 0,
) -> Tuple[float, float]:
    real_batch = np.asarray(real_batch, dtype=np.float32)
    if real_batch.shape[0] < 1:
        raise ValueError("real batch is empty")
    noise = sample_noise(real_batch.shape[0], model.config, seed)
    dl, fakes, _ = discriminator_step(model, d_opt, real_batch, noise)
    if not math.isfinite(dl):
        raise TrainingAborted(step, f"non-finite discriminator loss {dl}")
    gl, _ = generator_step(model, g_opt, noise, fakes)
    if not math.isfinite(gl):
        raise TrainingAborted(step, f"non-finite generator loss {gl}")
    return dl, gl


def train(images: np.ndarray, config: GanConfig, progress=None) -> Tuple[GanModel, TrainHistory]:
    """Run ``config.epochs`` epochs of shuffled mini-batch adversarial training.

    ``images`` is (N, C, H, W) scaled to [-1, 1].
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[0] < 1:
        raise ValueError(f"need a nonempty (N, C, H, W) image array, got {images.shape}")
    model = GanModel(config)
    d_opt, g_opt = make_optimizers(config)
    history = TrainHistory()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    n = images.shape[0]
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = images[order[start : start + config.batch_size]]
            noise_seed = int(rng.integers(0, 2**63 - 1))
            noise = sample_noise(batch.shape[0], config, noise_seed)
            dl, fakes, c1 = discriminator_step(model, d_opt, batch, noise)
            gl, c2 = generator_step(model, g_opt, noise, fakes)
            history.append(StepRecord(step, epoch, dl, gl, c1 + c2))
            if progress is not None:
                progress(history.records[-1])
            step += 1
    model.eval()
    return model, history


def pooled_taps(taps: Sequence[np.ndarray]) -> List[np.ndarray]:
    """C14, 2x-pooled C13, 4x-pooled C12 in concatenation order."""
    c12, c13, c14 = taps
    return [c14, maxpool(c13, 2), maxpool(c12, 4)]


def extract_features(model: GanModel, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """(N, feature_length) scene features for a stack of images."""
    images = np.asarray(images, dtype=np.float32)
    out = []
    for start in range(0, images.shape[0], batch_size):
        _, taps = discriminate(model, images[start : start + batch_size])
        out.append(concat_flatten(pooled_taps(taps)))
    feats = np.concatenate(out, axis=0)
    if not np.all(np.isfinite(feats)):
        raise FloatingPointError("non-finite scene features")
    return feats


def extract_scene_features(model: GanModel, image: np.ndarray, image_id: str = "") -> FeatureVector:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3:
        image = image[None]
    if image.shape[0] != 1:
        raise ShapeError(f"extract_scene_features takes one image, got batch of {image.shape[0]}")
    return FeatureVector(extract_features(model, image)[0], image_id)
