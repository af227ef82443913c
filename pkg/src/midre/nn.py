"""Classifiers, the public-data decoder prior, and their training loops."""
from __future__ import annotations

import copy
import enum
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
import torch
import torch.nn as tnn
import torch.nn.functional as F

from . import erasing
from .erasing import ErasePolicy, Scheme
from .errors import ConfigError, DivergenceError, ShapeError
from .synthdata import ImageBatch


class ArchKind(str, enum.Enum):
    CLASSIFIER_SMALL = "ClassifierSmall"
    CLASSIFIER_EVAL = "ClassifierEval"
    DECODER = "Decoder"


@dataclass(frozen=True)
class ArchSpec:
    kind: ArchKind
    in_shape: tuple[int, int, int]  # (C, H, W)
    channels: tuple[int, ...]
    feature_dim: int = 128
    num_classes: int = 0
    latent_dim: int = 0
    stride: int = 2
    nonlinearity: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "kind", ArchKind(self.kind))
        object.__setattr__(self, "in_shape", tuple(int(v) for v in self.in_shape))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        self.validate()

    def validate(self) -> None:
        c, h, w = self.in_shape
        if not self.channels or any(ch <= 0 for ch in self.channels):
            raise ConfigError(f"bad channel chain {self.channels}")
        if self.feature_dim <= 0:
            raise ConfigError("feature_dim must be positive")
        if self.nonlinearity not in _ACTIVATIONS:
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        down = self.stride ** len(self.channels)
        if h % down or w % down:
            raise ConfigError(f"{h}x{w} input not divisible by total stride {down}")
        if self.kind is ArchKind.DECODER:
            if self.latent_dim <= 0:
                raise ConfigError("decoder needs latent_dim > 0")
        elif self.num_classes < 2:
            raise ConfigError("classifier needs num_classes >= 2")

    @property
    def spatial(self) -> tuple[int, int]:
        down = self.stride ** len(self.channels)
        return self.in_shape[1] // down, self.in_shape[2] // down

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["in_shape"] = list(self.in_shape)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ArchSpec":
        try:
            return cls(**d)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def classifier_small(cls, in_shape, num_classes: int) -> "ArchSpec":
        return cls(ArchKind.CLASSIFIER_SMALL, in_shape, (16, 32, 64), feature_dim=128, num_classes=num_classes)

    @classmethod
    def classifier_eval(cls, in_shape, num_classes: int) -> "ArchSpec":
        # 4 stride-2 stages would leave 2x2 maps on 32x32 input, which is fine
        return cls(ArchKind.CLASSIFIER_EVAL, in_shape, (24, 48, 96, 96), feature_dim=160, num_classes=num_classes)

    @classmethod
    def decoder(cls, in_shape, latent_dim: int = 64) -> "ArchSpec":
        return cls(ArchKind.DECODER, in_shape, (64, 32, 16), feature_dim=latent_dim, latent_dim=latent_dim)


_ACTIVATIONS: dict[str, Callable[[], tnn.Module]] = {
    "relu": tnn.ReLU,
    "elu": tnn.ELU,
    "tanh": tnn.Tanh,
    "leaky_relu": lambda: tnn.LeakyReLU(0.2),
}


class Classifier(tnn.Module):
    def __init__(self, arch: ArchSpec):
        super().__init__()
        act = _ACTIVATIONS[arch.nonlinearity]
        layers: list[tnn.Module] = []
        prev = arch.in_shape[0]
        for ch in arch.channels:
            layers += [tnn.Conv2d(prev, ch, 3, stride=arch.stride, padding=1), act()]
            prev = ch
        self.body = tnn.Sequential(*layers)
        sh, sw = arch.spatial
        self.penultimate = tnn.Sequential(tnn.Flatten(), tnn.Linear(prev * sh * sw, arch.feature_dim), act())
        self.head = tnn.Linear(arch.feature_dim, arch.num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.penultimate(self.body(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class Decoder(tnn.Module):
    """Latent vector -> image in [0, 1] via transposed convolutions."""

    def __init__(self, arch: ArchSpec):
        super().__init__()
        act = _ACTIVATIONS[arch.nonlinearity]
        self.arch = arch
        sh, sw = arch.spatial
        self.stem = tnn.Sequential(tnn.Linear(arch.latent_dim, arch.channels[0] * sh * sw), act())
        layers: list[tnn.Module] = []
        chans = list(arch.channels) + [arch.in_shape[0]]
        for i, (a, b) in enumerate(zip(chans[:-1], chans[1:])):
            layers.append(tnn.ConvTranspose2d(a, b, 4, stride=arch.stride, padding=1))
            if i < len(chans) - 2:
                layers.append(act())
        self.body = tnn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        sh, sw = self.arch.spatial
        h = self.stem(z).view(z.shape[0], self.arch.channels[0], sh, sw)
        return torch.sigmoid(self.body(h))


class Encoder(tnn.Module):
    """Image -> (mean, log-variance) of the latent code; used only to train the decoder."""

    def __init__(self, arch: ArchSpec):
        super().__init__()
        act = _ACTIVATIONS[arch.nonlinearity]
        layers: list[tnn.Module] = []
        prev = arch.in_shape[0]
        for ch in reversed(arch.channels):
            layers += [tnn.Conv2d(prev, ch, 4, stride=arch.stride, padding=1), act()]
            prev = ch
        self.body = tnn.Sequential(*layers, tnn.Flatten())
        sh, sw = arch.spatial
        self.mu = tnn.Linear(prev * sh * sw, arch.latent_dim)
        self.logvar = tnn.Linear(prev * sh * sw, arch.latent_dim)

    def forward(self, x):
        h = self.body(x)
        return self.mu(h), self.logvar(h)


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    weight_decay: float = 0.0
    epoch_budget_fraction: float = 1.0
    kl_weight: float = 0.01  # decoder only

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError(f"invalid training config {self}")
        if not 0.0 <= self.epoch_budget_fraction <= 1.0:
            raise ConfigError("epoch_budget_fraction must lie in [0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e


@dataclass
class TrainedModel:
    arch: ArchSpec
    module: tnn.Module
    history: list[dict[str, float]] = field(default_factory=list)
    train_config: dict[str, Any] = field(default_factory=dict)

    @property
    def is_classifier(self) -> bool:
        return self.arch.kind is not ArchKind.DECODER

    def parameter_bytes(self) -> bytes:
        return b"".join(p.detach().numpy().tobytes() for p in self.module.state_dict().values())

    def copy(self) -> "TrainedModel":
        return TrainedModel(self.arch, copy.deepcopy(self.module), list(self.history), dict(self.train_config))


def _seeded(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def build_model(arch: ArchSpec, seed: int) -> TrainedModel:
    """Fresh model whose parameters depend only on ``(arch, seed)``."""
    arch.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        module = Decoder(arch) if arch.kind is ArchKind.DECODER else Classifier(arch)
    module.eval()
    return TrainedModel(arch, module, [], {"seed": int(seed)})


def _make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.lr, momentum=0.9, weight_decay=cfg.weight_decay)


def _to_tensor(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))


@torch.no_grad()
def predict_logits(model: TrainedModel, data: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.module.eval()
    out = [model.module(_to_tensor(data[i:i + batch_size])).numpy() for i in range(0, len(data), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.arch.num_classes), np.float32)


def accuracy(model: TrainedModel, batch: ImageBatch) -> float:
    """Top-1 accuracy on unmasked images."""
    if len(batch) == 0:
        return float("nan")
    return float((predict_logits(model, batch.data).argmax(1) == batch.labels).mean())


def train_classifier(model: TrainedModel, train_split: ImageBatch, test_split: ImageBatch,
                     policy: ErasePolicy, config: TrainConfig, seed: int,
                     loss_hook: Optional[Callable[[int, np.ndarray], None]] = None) -> TrainedModel:
    """Cross-entropy training with every minibatch passed through ``augment_batch``.

    ``loss_hook(epoch, images)`` sees the exact tensor contents entering the
    loss. Test accuracy in the history is measured on unmasked images.
    """
    if not model.is_classifier:
        raise ConfigError("train_classifier needs a classifier")
    num_classes = model.arch.num_classes
    if set(np.unique(train_split.labels)) != set(range(num_classes)):
        raise ConfigError("training labels do not cover the class range")
    if train_split.data.shape[1:] != model.arch.in_shape:
        raise ShapeError(f"training images {train_split.data.shape[1:]} vs model input {model.arch.in_shape}")
    out = model.copy()
    run_epochs = int(math.floor(config.epochs * config.epoch_budget_fraction + 1e-9))
    out.train_config = {**config.to_dict(), "seed": int(seed), "policy": policy.to_dict(),
                        "epochs_run": run_epochs}
    if run_epochs == 0:
        return out if model.history else TrainedModel(out.arch, out.module, [], out.train_config)
    net = out.module
    opt = _make_optimizer(net.parameters(), config)
    gen = _seeded(seed)
    n = len(train_split)
    labels_t = torch.from_numpy(train_split.labels)
    for epoch in range(run_epochs):
        net.train()
        order = torch.randperm(n, generator=gen).numpy()
        entire = None
        if policy.scheme is Scheme.ENTIRE_ERASE:
            entire = erasing.select_entire_erase(train_split.labels, policy.ee_fraction, seed, epoch)
        tot_loss, tot_correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            mb = erasing.augment_batch(train_split.subset(idx), policy, epoch, seed, indices=idx,
                                       entire_selected=None if entire is None else entire[idx])
            if loss_hook is not None:
                loss_hook(epoch, mb.data)
            x = _to_tensor(mb.data)
            y = labels_t[idx]
            logits = net(x)
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot_loss += float(loss.detach()) * len(idx)
            tot_correct += int((logits.argmax(1) == y).sum())
        net.eval()
        out.history.append({
            "epoch": len(out.history),
            "train_loss": tot_loss / n,
            "train_acc": tot_correct / n,
            "test_acc": accuracy(out, test_split),
        })
    return out


def _decoder_loss(enc, dec, x, kl_weight, gen):
    mu, logvar = enc(x)
    eps = torch.randn(mu.shape, generator=gen)
    z = mu + torch.exp(0.5 * logvar) * eps
    recon = dec(z)
    rec = F.mse_loss(recon, x, reduction="none").flatten(1).sum(1).mean()
    kl = (-0.5 * (1 + logvar - mu.pow(2) - logvar.exp()).sum(1)).mean()
    return rec + kl_weight * kl, rec


def train_decoder(public_split: ImageBatch, arch: ArchSpec, config: TrainConfig, seed: int,
                  holdout_per_identity: int = 2) -> TrainedModel:
    """Fit a decoder prior on public images as the generative half of a VAE.

    The reconstruction error (per-image summed squared error) on held-out
    public images is recorded as ``heldout_recon`` in the last history row.
    """
    if len(public_split) == 0:
        raise ConfigError("empty public split")
    if arch.kind is not ArchKind.DECODER:
        raise ConfigError("train_decoder needs a Decoder arch")
    if public_split.data.shape[1:] != arch.in_shape:
        raise ShapeError(f"public images {public_split.data.shape[1:]} vs decoder output {arch.in_shape}")
    from .synthdata import split_train_test

    counts = np.bincount(public_split.labels)
    if holdout_per_identity and counts.min() > holdout_per_identity:
        train, held = split_train_test(public_split, holdout_per_identity)
    else:
        train, held = public_split, public_split
    model = build_model(arch, seed)
    dec = model.module
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed) + 1)
        enc = Encoder(arch)
    opt = _make_optimizer(list(dec.parameters()) + list(enc.parameters()), config)
    gen = _seeded(seed)
    x_all = _to_tensor(train.data)
    x_held = _to_tensor(held.data)
    n = len(train)
    run_epochs = int(math.floor(config.epochs * config.epoch_budget_fraction + 1e-9))
    for epoch in range(run_epochs):
        dec.train()
        enc.train()
        order = torch.randperm(n, generator=gen)
        tot = 0.0
        for start in range(0, n, config.batch_size):
            xb = x_all[order[start:start + config.batch_size]]
            loss, rec = _decoder_loss(enc, dec, xb, config.kl_weight, gen)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite decoder loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += float(rec.detach()) * xb.shape[0]
        dec.eval()
        enc.eval()
        with torch.no_grad():
            mu, _ = enc(x_held)
            held_rec = float(F.mse_loss(dec(mu), x_held, reduction="none").flatten(1).sum(1).mean())
        model.history.append({"epoch": epoch, "train_recon": tot / n, "heldout_recon": held_rec})
    model.train_config = {**config.to_dict(), "seed": int(seed)}
    return model


def decode(decoder: TrainedModel, z: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        return decoder.module(_to_tensor(z)).numpy()


@dataclass
class FeatureSet:
    features: np.ndarray
    logits: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if not (len(self.features) == len(self.logits) == len(self.labels)):
            raise ShapeError("feature, logit and label row counts differ")

    def subset(self, idx) -> "FeatureSet":
        return FeatureSet(self.features[idx], self.logits[idx], self.labels[idx])


@torch.no_grad()
def extract_features(model: TrainedModel, batch: ImageBatch, batch_size: int = 256) -> FeatureSet:
    """Penultimate activations and logits, computed one image at a time per row block."""
    if not model.is_classifier:
        raise ConfigError("extract_features needs a classifier")
    if batch.data.shape[1:] != model.arch.in_shape:
        raise ShapeError(f"images {batch.data.shape[1:]} vs model input {model.arch.in_shape}")
    net = model.module
    net.eval()
    feats, logits = [], []
    for i in range(0, len(batch), batch_size):
        f = net.features(_to_tensor(batch.data[i:i + batch_size]))
        feats.append(f.numpy())
        logits.append(net.head(f).numpy())
    return FeatureSet(np.concatenate(feats), np.concatenate(logits), batch.labels.copy())


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(model: TrainedModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "arch": model.arch.to_dict(),
        "state_dict": model.module.state_dict(),
        "history": model.history,
        "train_config": model.train_config,
    }, path)


def load_checkpoint(path) -> TrainedModel:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    arch = ArchSpec.from_dict(blob["arch"])
    model = build_model(arch, 0)
    model.module.load_state_dict(blob["state_dict"])
    model.module.eval()
    model.history = list(blob["history"])
    model.train_config = dict(blob["train_config"])
    return model
