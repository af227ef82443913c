"""Occlusion masks for training-time erasing and its ablations.

Every random choice comes from an explicit ``numpy.random.Generator``. Batch
augmentation derives one generator per sample from ``(seed, epoch, index)``
so results do not depend on batching or evaluation order.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Any, Optional, Sequence

import numpy as np

from .errors import ConfigError, GeometryError, InvalidPolicy, ShapeError
from .synthdata import ImageBatch

MAX_CORNER_TRIES = 100
IMAGENET_MEAN = (0.485, 0.456, 0.406)


class Scheme(str, enum.Enum):
    RANDOM_ERASE = "RandomErase"
    FIXED_ERASE = "FixedErase"
    ENTIRE_ERASE = "EntireErase"
    RANDOM_PIXELS = "RandomPixels"
    MULTI_PATCH = "MultiPatch"
    NO_DEFENSE = "NoDefense"


class FillKind(str, enum.Enum):
    CONSTANT = "Constant"
    UNIFORM_RANDOM = "UniformRandom"
    CHANNEL_MEAN = "ChannelMean"


@dataclass(frozen=True)
class FillStrategy:
    kind: FillKind = FillKind.CHANNEL_MEAN
    constant_value: float = 0.0
    channel_means: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", FillKind(self.kind))
        if not 0.0 <= self.constant_value <= 1.0:
            raise ConfigError(f"constant_value {self.constant_value} outside [0, 1]")
        if self.channel_means is not None:
            means = tuple(float(m) for m in self.channel_means)
            if any(not 0.0 <= m <= 1.0 for m in means):
                raise ConfigError(f"channel_means {means} outside [0, 1]")
            object.__setattr__(self, "channel_means", means)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "constant_value": self.constant_value,
            "channel_means": list(self.channel_means) if self.channel_means is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FillStrategy":
        unknown = set(d) - {"kind", "constant_value", "channel_means"}
        if unknown:
            raise ConfigError(f"unknown fill keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e


@dataclass(frozen=True)
class ErasePolicy:
    """Complete description of one occlusion scheme.

    ``a_lo``/``a_hi`` bound the erased-area fraction drawn per region;
    ``aspect`` is the width/height shape factor of rectangular regions.
    """

    scheme: Scheme = Scheme.RANDOM_ERASE
    a_lo: float = 0.1
    a_hi: float = 0.4
    aspect: float = 1.0
    patches: int = 1
    pixel_prob: float = 0.0
    ee_fraction: float = 0.0
    fill: FillStrategy = field(default_factory=FillStrategy)

    def __post_init__(self):
        try:
            object.__setattr__(self, "scheme", Scheme(self.scheme))
        except ValueError as e:
            raise InvalidPolicy(f"unknown scheme {self.scheme!r}") from e
        if isinstance(self.fill, dict):
            object.__setattr__(self, "fill", FillStrategy.from_dict(self.fill))
        if not (0.0 < self.a_lo <= self.a_hi <= 1.0):
            raise ConfigError(f"need 0 < a_lo <= a_hi <= 1, got a_lo={self.a_lo}, a_hi={self.a_hi}")
        if not self.aspect > 0:
            raise ConfigError(f"aspect must be positive, got {self.aspect}")
        if not 0.0 <= self.pixel_prob <= 1.0:
            raise ConfigError(f"pixel_prob {self.pixel_prob} outside [0, 1]")
        if int(self.patches) != self.patches or self.patches < 1:
            raise ConfigError(f"patches must be a positive integer, got {self.patches}")
        if not 0.0 <= self.ee_fraction <= 1.0:
            raise ConfigError(f"ee_fraction {self.ee_fraction} outside [0, 1]")

    @classmethod
    def no_defense(cls) -> "ErasePolicy":
        return cls(scheme=Scheme.NO_DEFENSE)

    @classmethod
    def random_erase(cls, a_hi: float, a_lo: float = 0.1, **kw) -> "ErasePolicy":
        return cls(scheme=Scheme.RANDOM_ERASE, a_lo=min(a_lo, a_hi), a_hi=a_hi, **kw)

    def with_fill(self, fill: FillStrategy) -> "ErasePolicy":
        return replace(self, fill=fill)

    def to_dict(self) -> dict[str, Any]:
        return {
            "scheme": self.scheme.value,
            "a_lo": self.a_lo,
            "a_hi": self.a_hi,
            "aspect": self.aspect,
            "patches": self.patches,
            "pixel_prob": self.pixel_prob,
            "ee_fraction": self.ee_fraction,
            "fill": self.fill.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ErasePolicy":
        d = dict(d)
        unknown = set(d) - {"scheme", "a_lo", "a_hi", "aspect", "patches", "pixel_prob", "ee_fraction", "fill"}
        if unknown:
            raise ConfigError(f"unknown policy keys: {sorted(unknown)}")
        if "fill" in d and not isinstance(d["fill"], FillStrategy):
            d["fill"] = FillStrategy.from_dict(d["fill"] or {})
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e


@dataclass(frozen=True)
class EraseRegion:
    x_e: int
    y_e: int
    w_r: int
    h_r: int

    @property
    def area(self) -> int:
        return self.w_r * self.h_r

    def check(self, width: int, height: int) -> None:
        if self.w_r < 1 or self.h_r < 1:
            raise GeometryError(f"empty region {self}")
        if self.x_e < 0 or self.y_e < 0 or self.x_e + self.w_r > width or self.y_e + self.h_r > height:
            raise GeometryError(f"region {self} not inside {width}x{height} image")


@dataclass(frozen=True)
class MaskSpec:
    """Which pixels of one image get replaced.

    Exactly one representation is meaningful: ``whole`` wins, then
    ``pixels``, then ``regions``. An instance with none of them is the empty
    (pass-through) mask.
    """

    regions: tuple[EraseRegion, ...] = ()
    pixels: Optional[np.ndarray] = None
    whole: bool = False

    @property
    def is_empty(self) -> bool:
        return not self.whole and not self.regions and (self.pixels is None or not self.pixels.any())

    def to_array(self, height: int, width: int) -> np.ndarray:
        out = np.zeros((height, width), dtype=bool)
        if self.whole:
            out[:] = True
            return out
        if self.pixels is not None:
            if self.pixels.shape != (height, width):
                raise ShapeError(f"pixel mask {self.pixels.shape} does not match image {(height, width)}")
            return self.pixels.copy()
        for r in self.regions:
            r.check(width, height)
            out[r.y_e:r.y_e + r.h_r, r.x_e:r.x_e + r.w_r] = True
        return out

    def __eq__(self, other):
        if not isinstance(other, MaskSpec):
            return NotImplemented
        if self.whole != other.whole or self.regions != other.regions:
            return False
        if (self.pixels is None) != (other.pixels is None):
            return False
        return self.pixels is None or np.array_equal(self.pixels, other.pixels)

    __hash__ = None


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def _region_for_fraction(width: int, height: int, a_e: float, aspect: float,
                         rng: np.random.Generator) -> EraseRegion:
    s_re = width * height * a_e
    w_r = min(max(_round_half_up(math.sqrt(s_re * aspect)), 1), width)
    h_r = min(max(_round_half_up(math.sqrt(s_re / aspect)), 1), height)
    if w_r > width or h_r > height:
        raise GeometryError(f"{w_r}x{h_r} region cannot fit in {width}x{height}")
    for _ in range(MAX_CORNER_TRIES):
        x_e = int(rng.integers(0, width))
        y_e = int(rng.integers(0, height))
        if x_e + w_r <= width and y_e + h_r <= height:
            return EraseRegion(x_e, y_e, w_r, h_r)
    # fall back to the feasible rectangle, which is non-empty after clamping
    x_e = int(rng.integers(0, width - w_r + 1))
    y_e = int(rng.integers(0, height - h_r + 1))
    return EraseRegion(x_e, y_e, w_r, h_r)


def _draw_fraction(lo: float, hi: float, rng: np.random.Generator) -> float:
    if lo == hi:
        return lo
    return float(rng.uniform(lo, hi))


def sample_erase_region(width: int, height: int, policy: ErasePolicy, rng: np.random.Generator,
                        area_fraction: Optional[float] = None) -> EraseRegion:
    """Draw one erase rectangle for a ``width`` x ``height`` image.

    The area fraction is uniform on ``[policy.a_lo, policy.a_hi]`` unless
    ``area_fraction`` pins it. The top-left corner is redrawn until the
    rectangle fits; after ``MAX_CORNER_TRIES`` misses it is drawn from the
    feasible rectangle directly.
    """
    if policy.scheme not in (Scheme.RANDOM_ERASE, Scheme.FIXED_ERASE):
        raise InvalidPolicy(f"sample_erase_region needs RandomErase or FixedErase, got {policy.scheme.value}")
    if width < 4 or height < 4:
        raise GeometryError(f"image {width}x{height} smaller than 4x4")
    a_e = _draw_fraction(policy.a_lo, policy.a_hi, rng) if area_fraction is None else float(area_fraction)
    if not 0.0 < a_e <= 1.0:
        raise GeometryError(f"area fraction {a_e} outside (0, 1]")
    region = _region_for_fraction(width, height, a_e, policy.aspect, rng)
    region.check(width, height)
    return region


def sample_stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator keyed by ``(seed, *key)``."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *(int(k) for k in key)])


_FIXED_STREAM_TAG = 0xF1
_ENTIRE_STREAM_TAG = 0xEE


def make_mask(policy: ErasePolicy, image_index: int, epoch: int, width: int, height: int,
              rng: np.random.Generator, location_seed: int = 0,
              selected: Optional[bool] = None) -> MaskSpec:
    """Mask for one image at one epoch.

    FixedErase ignores ``rng`` and ``epoch``: its rectangle depends only on
    ``(location_seed, image_index)``. EntireErase blanks the image when
    ``selected`` is true; if ``selected`` is None a Bernoulli(ee_fraction)
    draw from ``rng`` decides.
    """
    scheme = policy.scheme
    if scheme is Scheme.NO_DEFENSE:
        return MaskSpec()
    if scheme is Scheme.RANDOM_ERASE:
        return MaskSpec(regions=(sample_erase_region(width, height, policy, rng),))
    if scheme is Scheme.FIXED_ERASE:
        fixed_rng = sample_stream(location_seed, _FIXED_STREAM_TAG, image_index)
        return MaskSpec(regions=(sample_erase_region(width, height, policy, fixed_rng),))
    if scheme is Scheme.ENTIRE_ERASE:
        if selected is None:
            selected = bool(rng.random() < policy.ee_fraction)
        return MaskSpec(whole=True) if selected else MaskSpec()
    if scheme is Scheme.RANDOM_PIXELS:
        return MaskSpec(pixels=rng.random((height, width)) < policy.pixel_prob)
    if scheme is Scheme.MULTI_PATCH:
        lo, hi = policy.a_lo / policy.patches, policy.a_hi / policy.patches
        regions = []
        for _ in range(policy.patches):
            a_e = _draw_fraction(lo, hi, rng)
            regions.append(_region_for_fraction(width, height, a_e, policy.aspect, rng))
        return MaskSpec(regions=tuple(regions))
    raise InvalidPolicy(f"unhandled scheme {scheme}")


def fill_values(fill: FillStrategy, channels: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Replacement intensities for ``count`` masked pixels, shape [channels, count]."""
    if fill.kind is FillKind.CONSTANT:
        return np.full((channels, count), fill.constant_value, dtype=np.float32)
    if fill.kind is FillKind.CHANNEL_MEAN:
        if fill.channel_means is None:
            raise ConfigError("ChannelMean fill needs channel_means")
        if len(fill.channel_means) != channels:
            raise ShapeError(f"{len(fill.channel_means)} channel means for a {channels}-channel image")
        means = np.asarray(fill.channel_means, dtype=np.float32)[:, None]
        return np.broadcast_to(means, (channels, count)).copy()
    return rng.random((channels, count), dtype=np.float32)


def apply_mask(image: np.ndarray, mask: MaskSpec, fill: FillStrategy,
               rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Return a copy of ``image`` ([C, H, W]) with masked pixels replaced."""
    if image.ndim != 3:
        raise ShapeError(f"expected [C, H, W] image, got shape {image.shape}")
    c, h, w = image.shape
    out = image.copy()
    if mask.is_empty:
        return out
    m = mask.to_array(h, w)
    if rng is None:
        rng = np.random.default_rng(0)
    vals = fill_values(fill, c, int(m.sum()), rng)
    out[:, m] = vals.astype(out.dtype, copy=False)
    return out


def select_entire_erase(labels: np.ndarray, ee_fraction: float, seed: int, epoch: int) -> np.ndarray:
    """Per-epoch EntireErase membership.

    Within each identity, ``round(ee_fraction * n_id)`` samples are chosen
    uniformly without replacement; the choice is redrawn every epoch.
    """
    labels = np.asarray(labels)
    chosen = np.zeros(labels.shape[0], dtype=bool)
    for lab in np.unique(labels):
        members = np.flatnonzero(labels == lab)
        k = _round_half_up(ee_fraction * members.size)
        if k == 0:
            continue
        rng = sample_stream(seed, _ENTIRE_STREAM_TAG, epoch, int(lab))
        chosen[rng.permutation(members)[:k]] = True
    return chosen


def augment_batch(batch: ImageBatch, policy: ErasePolicy, epoch: int, rng_seed: int,
                  indices: Optional[Sequence[int]] = None,
                  entire_selected: Optional[np.ndarray] = None) -> ImageBatch:
    """Mask every sample of ``batch`` for training epoch ``epoch``.

    ``indices`` gives each row's global dataset index (defaults to
    ``0..N-1``) and keys the per-sample random stream. ``entire_selected``
    is the EntireErase membership for these rows; when omitted the batch is
    treated as the whole dataset.
    """
    n, c, h, w = batch.data.shape
    if n == 0:
        raise ShapeError("empty batch")
    if policy.scheme is Scheme.NO_DEFENSE:
        return ImageBatch(batch.data.copy(), batch.labels.copy())
    idx = np.arange(n) if indices is None else np.asarray(indices)
    if idx.shape != (n,):
        raise ShapeError(f"{idx.shape[0]} indices for {n} samples")
    if policy.scheme is Scheme.ENTIRE_ERASE and entire_selected is None:
        entire_selected = select_entire_erase(batch.labels, policy.ee_fraction, rng_seed, epoch)
    out = batch.data.copy()
    for row in range(n):
        rng = sample_stream(rng_seed, epoch, int(idx[row]))
        sel = None if entire_selected is None else bool(entire_selected[row])
        mask = make_mask(policy, int(idx[row]), epoch, w, h, rng, location_seed=rng_seed, selected=sel)
        if not mask.is_empty:
            out[row] = apply_mask(batch.data[row], mask, policy.fill, rng)
    return ImageBatch(out, batch.labels.copy())


def batch_masks(policy: ErasePolicy, count: int, width: int, height: int,
                rng: np.random.Generator) -> np.ndarray:
    """Boolean masks [count, H, W] for ``count`` fresh draws of ``policy``."""
    out = np.zeros((count, height, width), dtype=bool)
    for i in range(count):
        out[i] = make_mask(policy, i, 0, width, height, rng).to_array(height, width)
    return out
