"""Gradient-based model inversion against a trained classifier.

A candidate is optimized to minimize the target's cross-entropy for the
attacked label plus image priors, either directly in pixel space or through
the latent space of the public decoder. Several restarts are run per
identity and the one the target is most confident about is kept.
"""
from __future__ import annotations

import enum
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .erasing import ErasePolicy, FillKind, batch_masks, sample_stream
from .errors import ConfigError, DivergenceError
from .nn import TrainedModel
from .synthdata import ImageBatch

log = logging.getLogger(__name__)


class Strategy(str, enum.Enum):
    PIXEL = "PixelSpace"
    LATENT = "LatentSpace"


@dataclass
class AttackConfig:
    strategy: Strategy = Strategy.LATENT
    adaptive: bool = False
    adaptive_policy: Optional[ErasePolicy] = None
    restarts: int = 8
    steps: int = 300
    step_size: float = 0.05
    lambda_tv: float = 1e-3
    lambda_l2: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        if isinstance(self.adaptive_policy, dict):
            self.adaptive_policy = ErasePolicy.from_dict(self.adaptive_policy)
        if self.restarts < 1 or self.steps < 1:
            raise ConfigError("restarts and steps must be >= 1")
        if self.lambda_tv < 0 or self.lambda_l2 < 0:
            raise ConfigError("prior weights must be non-negative")
        if not self.step_size > 0:
            raise ConfigError("step_size must be positive")
        if self.adaptive and self.adaptive_policy is None:
            raise ConfigError("adaptive attack needs adaptive_policy")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["strategy"] = self.strategy.value
        d["adaptive_policy"] = self.adaptive_policy.to_dict() if self.adaptive_policy else None
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AttackConfig":
        try:
            return cls(**d)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class AttackResult:
    label: int
    sample: int
    candidates: np.ndarray  # [R, C, H, W] final candidate of every restart
    traces: np.ndarray  # [R, steps + 1] objective value per restart
    confidences: np.ndarray  # [R] target softmax probability of ``label``
    selected: int
    config_digest: str = ""
    target_id: str = ""

    @property
    def reconstruction(self) -> np.ndarray:
        return self.candidates[self.selected]

    @property
    def confidence(self) -> float:
        return float(self.confidences[self.selected])


@dataclass
class AttackCollection:
    results: list[AttackResult] = field(default_factory=list)
    failed: dict[int, str] = field(default_factory=dict)

    def as_batch(self) -> ImageBatch:
        if not self.results:
            raise ConfigError("no reconstructions to batch")
        return ImageBatch(np.stack([r.reconstruction for r in self.results]),
                          np.array([r.label for r in self.results]))

    def save(self, path) -> None:
        """Dump reconstructions as images.bin/labels.bin plus a JSON sidecar."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        batch = self.as_batch()
        batch.data.astype("<f4").tofile(path / "images.bin")
        batch.labels.astype("<u4").tofile(path / "labels.bin")
        n, c, h, w = batch.data.shape
        side = {
            "width": w, "height": h, "channels": c, "count": n,
            "entries": [{"label": r.label, "sample": r.sample, "restart": r.selected,
                         "confidence": r.confidence, "config_hash": r.config_digest,
                         "target": r.target_id} for r in self.results],
            "failed": {str(k): v for k, v in self.failed.items()},
        }
        (path / "reconstructions.json").write_text(json.dumps(side, indent=2, sort_keys=True), encoding="utf-8")


def load_reconstructions(path) -> tuple[ImageBatch, dict[str, Any]]:
    path = Path(path)
    side = json.loads((path / "reconstructions.json").read_text(encoding="utf-8"))
    data = np.fromfile(path / "images.bin", dtype="<f4").astype(np.float32)
    data = data.reshape(side["count"], side["channels"], side["height"], side["width"])
    labels = np.fromfile(path / "labels.bin", dtype="<u4").astype(np.int64)
    return ImageBatch(data, labels), side


def save_archive(coll: AttackCollection, path) -> None:
    """Lossless dump of every restart (candidates, traces, confidences) as one .npz."""
    if not coll.results:
        raise ConfigError("nothing to archive")
    rs = coll.results
    meta = {"entries": [[r.label, r.sample, r.selected, r.config_digest, r.target_id] for r in rs],
            "failed": {str(k): v for k, v in coll.failed.items()}}
    with open(path, "wb") as f:
        np.savez(f, candidates=np.stack([r.candidates for r in rs]), traces=np.stack([r.traces for r in rs]),
                 confidences=np.stack([r.confidences for r in rs]), meta=np.array(json.dumps(meta)))


def load_archive(path) -> AttackCollection:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        out = AttackCollection(failed={int(k): v for k, v in meta["failed"].items()})
        for i, (label, sample, sel, digest, tid) in enumerate(meta["entries"]):
            out.results.append(AttackResult(int(label), int(sample), z["candidates"][i], z["traces"][i],
                                            z["confidences"][i], int(sel), digest, tid))
    return out


def total_variation(x: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between neighbouring pixels, per image."""
    dh = (x[..., 1:, :] - x[..., :-1, :]).pow(2).flatten(1).mean(1)
    dw = (x[..., :, 1:] - x[..., :, :-1]).pow(2).flatten(1).mean(1)
    return dh + dw


def _fill_tensor(policy: ErasePolicy, shape, rng: np.random.Generator, dtype) -> torch.Tensor:
    n, c, h, w = shape
    fill = policy.fill
    if fill.kind is FillKind.CONSTANT:
        return torch.full((1, c, 1, 1), fill.constant_value, dtype=dtype)
    if fill.kind is FillKind.CHANNEL_MEAN:
        if fill.channel_means is None:
            raise ConfigError("ChannelMean fill needs channel_means")
        return torch.tensor(fill.channel_means, dtype=dtype).view(1, c, 1, 1)
    return torch.from_numpy(rng.random(shape)).to(dtype)


def attack_objective(target: TrainedModel, params: torch.Tensor, labels: torch.Tensor, config: AttackConfig,
                     decoder: Optional[TrainedModel] = None, mask: Optional[torch.Tensor] = None,
                     fill: Optional[torch.Tensor] = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-candidate objective and the rendered candidate images.

    ``params`` are pixels [N, C, H, W] (PixelSpace) or latents [N, D]
    (LatentSpace). ``mask`` [N, H, W] with ``fill`` applies adaptive erasing
    to the images the target sees; priors act on the unmasked candidate.
    """
    if config.strategy is Strategy.LATENT:
        if decoder is None:
            raise ConfigError("LatentSpace attack needs a decoder")
        images = decoder.module(params)
        prior = config.lambda_l2 * params.pow(2).sum(1)
    else:
        images = params
        prior = config.lambda_tv * total_variation(images) + config.lambda_l2 * images.pow(2).flatten(1).sum(1)
    seen = images
    if mask is not None:
        m = mask.unsqueeze(1).to(images.dtype)
        seen = images * (1 - m) + fill * m
    ce = F.cross_entropy(target.module(seen), labels, reduction="none")
    return ce + prior, images


def _run_batch(target: TrainedModel, decoder: Optional[TrainedModel], jobs: Sequence[tuple[int, int]],
               config: AttackConfig, num_classes: int):
    """Optimize ``len(jobs) * restarts`` candidates jointly.

    Every candidate has its own initialization stream and Adam is
    elementwise, so joint optimization equals independent optimization.
    """
    R = config.restarts
    c, h, w = target.arch.in_shape
    init = []
    for label, k in jobs:
        for r in range(R):
            rng = sample_stream(config.seed, label, k, r)
            if config.strategy is Strategy.LATENT:
                init.append(rng.standard_normal(decoder.arch.latent_dim))
            else:
                init.append(rng.random((c, h, w)))
    params = torch.tensor(np.stack(init), dtype=torch.float32, requires_grad=True)
    labels = torch.tensor([label for label, _ in jobs for _ in range(R)], dtype=torch.long)
    opt = torch.optim.Adam([params], lr=config.step_size)
    mask_rng = sample_stream(config.seed, 0xADA, jobs[0][0], jobs[0][1])
    n = params.shape[0]
    traces = np.zeros((n, config.steps + 1), dtype=np.float64)
    target.module.eval()
    if decoder is not None:
        decoder.module.eval()
    for p in target.module.parameters():
        p.requires_grad_(False)
    if decoder is not None:
        for p in decoder.module.parameters():
            p.requires_grad_(False)
    try:
        for step in range(config.steps):
            mask = fill = None
            if config.adaptive:
                pol = config.adaptive_policy
                mask = torch.from_numpy(batch_masks(pol, n, w, h, mask_rng))
                fill = _fill_tensor(pol, (n, c, h, w), mask_rng, torch.float32)
            obj, _ = attack_objective(target, params, labels, config, decoder, mask, fill)
            traces[:, step] = obj.detach().numpy()
            opt.zero_grad()
            obj.sum().backward()
            opt.step()
            if config.strategy is Strategy.PIXEL:
                with torch.no_grad():
                    params.clamp_(0.0, 1.0)
        with torch.no_grad():
            obj, images = attack_objective(target, params, labels, config, decoder)
            traces[:, -1] = obj.numpy()
            probs = F.softmax(target.module(images), dim=1)
            conf = probs[torch.arange(n), labels].numpy().astype(np.float64)
            images = images.clamp(0.0, 1.0).numpy()
    finally:
        for p in target.module.parameters():
            p.requires_grad_(True)
        if decoder is not None:
            for p in decoder.module.parameters():
                p.requires_grad_(True)
    return images, traces, conf


def _collect(jobs, images, traces, conf, config: AttackConfig, target_id: str,
             out: AttackCollection) -> None:
    R = config.restarts
    digest = config.digest()
    for j, (label, k) in enumerate(jobs):
        sl = slice(j * R, (j + 1) * R)
        if not (np.isfinite(traces[sl]).all() and np.isfinite(images[sl]).all()):
            out.failed[label] = "non-finite objective"
            continue
        c = conf[sl]
        out.results.append(AttackResult(label, k, images[sl].astype(np.float32), traces[sl], c,
                                        int(np.argmax(c)), digest, target_id))


def invert_identity(target: TrainedModel, label: int, decoder: Optional[TrainedModel] = None,
                    config: Optional[AttackConfig] = None, sample: int = 0, target_id: str = "") -> AttackResult:
    """Run ``config.restarts`` inversions of ``label`` and keep the most confident."""
    config = config or AttackConfig()
    num_classes = target.arch.num_classes
    if not 0 <= label < num_classes:
        raise ConfigError(f"label {label} outside [0, {num_classes})")
    if config.strategy is Strategy.LATENT and decoder is None:
        raise ConfigError("LatentSpace attack needs a decoder")
    jobs = [(int(label), int(sample))]
    out = AttackCollection()
    _collect(jobs, *_run_batch(target, decoder, jobs, config, num_classes), config, target_id, out)
    if out.failed:
        raise DivergenceError(f"label {label}: {out.failed[label]}")
    return out.results[0]


def attack_all(target: TrainedModel, decoder: Optional[TrainedModel], labels: Sequence[int],
               config: AttackConfig, samples_per_identity: int = 1, target_id: str = "",
               chunk: int = 64) -> AttackCollection:
    """``samples_per_identity`` independent reconstructions for every label.

    Labels whose optimization diverges are recorded in ``failed``; the sweep
    carries on with the rest.
    """
    labels = [int(l) for l in labels]
    if not labels:
        raise ConfigError("no labels to attack")
    num_classes = target.arch.num_classes
    bad = [l for l in labels if not 0 <= l < num_classes]
    if bad:
        raise ConfigError(f"labels {bad} outside [0, {num_classes})")
    if config.strategy is Strategy.LATENT and decoder is None:
        raise ConfigError("LatentSpace attack needs a decoder")
    jobs = [(l, k) for l in labels for k in range(samples_per_identity)]
    out = AttackCollection()
    per_chunk = max(1, chunk // config.restarts)
    for start in range(0, len(jobs), per_chunk):
        part = jobs[start:start + per_chunk]
        try:
            _collect(part, *_run_batch(target, decoder, part, config, num_classes), config, target_id, out)
        except (RuntimeError, DivergenceError) as e:
            log.warning("attack chunk %s failed: %s", part, e)
            for label, _ in part:
                out.failed[label] = str(e)
    return out
