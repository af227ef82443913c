"""Deterministic synthetic identity dataset ("SynthFaces") and its file format.

Each identity is a fixed face-like composition of soft-edged coloured
ellipses (shoulders, hair, head, ears, eyes, nose, mouth). Samples of an identity are renders
of that composition on a jittered grey background under a small random
translation, a global brightness factor and additive Gaussian noise.
Private and public splits draw their identities from disjoint seed streams
of the same generative family.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .errors import ConfigError, FormatError, InvariantError

FORMAT_VERSION = 1

MAX_SHIFT = 3
NOISE_SIGMA = 0.03
BRIGHTNESS = 0.10
EDGE_SOFTNESS = 0.8
BACKGROUND_JITTER = 0.15


@dataclass
class ImageBatch:
    data: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.data.ndim != 4:
            raise InvariantError(f"image data must be [N, C, H, W], got {self.data.shape}")
        if self.labels.shape != (self.data.shape[0],):
            raise InvariantError(f"{self.labels.shape} labels for {self.data.shape[0]} images")

    def __len__(self) -> int:
        return self.data.shape[0]

    def subset(self, idx) -> "ImageBatch":
        return ImageBatch(self.data[idx], self.labels[idx])

    @property
    def geometry(self) -> tuple[int, int, int]:
        _, c, h, w = self.data.shape
        return w, h, c


@dataclass
class DatasetBundle:
    private: ImageBatch
    public: ImageBatch
    private_identities: list[int]
    public_identities: list[int]
    geometry: tuple[int, int, int]  # (W, H, C)
    provenance: dict[str, Any] = field(default_factory=dict)

    def validate(self) -> None:
        if set(self.private_identities) & set(self.public_identities):
            raise InvariantError("private and public identity sets intersect")
        for name, split, ids in (("private", self.private, self.private_identities),
                                 ("public", self.public, self.public_identities)):
            _validate_split(name, split, len(ids), self.geometry)

    def __eq__(self, other):
        if not isinstance(other, DatasetBundle):
            return NotImplemented
        return (self.geometry == other.geometry
                and self.private_identities == other.private_identities
                and self.public_identities == other.public_identities
                and self.provenance == other.provenance
                and _batch_bytes_equal(self.private, other.private)
                and _batch_bytes_equal(self.public, other.public))


def _batch_bytes_equal(a: ImageBatch, b: ImageBatch) -> bool:
    return (a.data.shape == b.data.shape and a.data.tobytes() == b.data.tobytes()
            and a.labels.tobytes() == b.labels.tobytes())


def _validate_split(name: str, split: ImageBatch, num_identities: int, geometry) -> None:
    w, h, c = geometry
    if len(split) == 0:
        raise InvariantError(f"{name} split is empty")
    if split.data.shape[1:] != (c, h, w):
        raise InvariantError(f"{name} images have shape {split.data.shape[1:]}, expected {(c, h, w)}")
    if not np.isfinite(split.data).all():
        raise InvariantError(f"{name} split contains non-finite pixels")
    if split.data.min() < 0.0 or split.data.max() > 1.0:
        raise InvariantError(f"{name} split has intensities outside [0, 1]")
    if split.labels.min() < 0 or split.labels.max() >= num_identities:
        raise InvariantError(
            f"{name} labels must lie in [0, {num_identities}), found [{split.labels.min()}, {split.labels.max()}]")


def _identity_params(rng: np.random.Generator, channels: int) -> dict[str, np.ndarray]:
    """Face-like layout: shoulders, hair, head, ears, eyes, nose, mouth.

    Coordinates and radii are fractions of the image side. The layout is
    shared by every identity; positions, sizes and colours are not. Hair and
    shoulders reach the image border so identity cues exist off-centre too.
    """
    def col(lo, hi):
        return rng.uniform(lo, hi, size=channels)

    skin = col(0.35, 0.95)
    hair = col(0.0, 1.0)
    head_rx, head_ry = rng.uniform(0.24, 0.32), rng.uniform(0.30, 0.38)
    head_cy = 0.50
    hair_rx, hair_ry = head_rx + rng.uniform(0.04, 0.16), head_ry + rng.uniform(0.04, 0.14)
    hair_cy = head_cy + rng.uniform(-0.06, 0.10)
    fringe_ry = rng.uniform(0.08, 0.18)
    eye_dx, eye_y = rng.uniform(0.09, 0.15), rng.uniform(0.42, 0.50)
    eye_r = rng.uniform(0.035, 0.06)
    mouth_y, mouth_rx = rng.uniform(0.64, 0.72), rng.uniform(0.06, 0.14)
    nose_ry = rng.uniform(0.04, 0.08)
    ear_r = rng.uniform(0.04, 0.08)
    ellipses = [
        # (cx, cy, rx, ry, angle, colour)
        (0.5, 1.02, rng.uniform(0.35, 0.55), rng.uniform(0.14, 0.26), 0.0, col(0.0, 1.0)),
        (0.5, hair_cy, hair_rx, hair_ry, 0.0, hair),
        (0.5 - head_rx, eye_y + 0.04, ear_r, ear_r * 1.5, 0.0, skin * rng.uniform(0.7, 1.0)),
        (0.5 + head_rx, eye_y + 0.04, ear_r, ear_r * 1.5, 0.0, skin * rng.uniform(0.7, 1.0)),
        (0.5, head_cy, head_rx, head_ry, 0.0, skin),
        (0.5, head_cy - head_ry + fringe_ry * 0.5, head_rx * 1.02, fringe_ry, 0.0, hair),
        (0.5 - eye_dx, eye_y, eye_r * 1.3, eye_r, rng.uniform(-0.3, 0.3), col(0.0, 0.7)),
        (0.5 + eye_dx, eye_y, eye_r * 1.3, eye_r, rng.uniform(-0.3, 0.3), col(0.0, 0.7)),
        (0.5, (eye_y + mouth_y) / 2, 0.03, nose_ry, 0.0, skin * rng.uniform(0.5, 0.8)),
        (0.5, mouth_y, mouth_rx, 0.03, 0.0, col(0.2, 1.0)),
    ]
    return {
        "center": np.array([[e[0], e[1]] for e in ellipses]),
        "radius": np.array([[e[2], e[3]] for e in ellipses]),
        "angle": np.array([e[4] for e in ellipses]),
        "color": np.stack([e[5] for e in ellipses]),
    }


def _render(params: dict[str, np.ndarray], width: int, height: int, dx: float, dy: float,
            background: np.ndarray) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.broadcast_to(background[:, None, None], (background.size, height, width)).copy()
    for (cx, cy), (rx, ry), ang, col in zip(params["center"], params["radius"], params["angle"], params["color"]):
        px = xs + 0.5 - (cx * width + dx)
        py = ys + 0.5 - (cy * height + dy)
        u = px * np.cos(ang) + py * np.sin(ang)
        v = -px * np.sin(ang) + py * np.cos(ang)
        rad = np.sqrt((u / (rx * width)) ** 2 + (v / (ry * height)) ** 2)
        # signed distance to the ellipse boundary in (approximate) pixels
        dist = (1.0 - rad) * min(rx * width, ry * height)
        alpha = 1.0 / (1.0 + np.exp(-dist / EDGE_SOFTNESS))
        img = img * (1.0 - alpha) + col[:, None, None] * alpha
    return img


def _render_identity(params, samples: int, width: int, height: int, rng: np.random.Generator) -> np.ndarray:
    c = params["color"].shape[1]
    out = np.empty((samples, c, height, width), dtype=np.float32)
    for s in range(samples):
        dx, dy = rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=2)
        background = np.full(c, 0.5) + rng.uniform(-BACKGROUND_JITTER, BACKGROUND_JITTER, size=c)
        img = _render(params, width, height, float(dx), float(dy), background)
        img = img * rng.uniform(1.0 - BRIGHTNESS, 1.0 + BRIGHTNESS)
        img = img + rng.normal(0.0, NOISE_SIGMA, size=img.shape)
        out[s] = np.clip(img, 0.0, 1.0)
    return out


_ROLE_TAG = {"private": 0, "public": 1}


def _generate_split(role: str, num_identities: int, samples: int, geometry, seed: int) -> ImageBatch:
    w, h, c = geometry
    data = np.empty((num_identities * samples, c, h, w), dtype=np.float32)
    for k in range(num_identities):
        id_rng = np.random.default_rng([seed, _ROLE_TAG[role], k])
        params = _identity_params(id_rng, c)
        data[k * samples:(k + 1) * samples] = _render_identity(params, samples, w, h, id_rng)
    labels = np.repeat(np.arange(num_identities, dtype=np.int64), samples)
    return ImageBatch(data, labels)


def generate_synthfaces(num_identities_per_split: int = 32, samples_per_identity: int = 20,
                        geometry: tuple[int, int, int] = (32, 32, 3), seed: int = 0) -> DatasetBundle:
    """Build private and public splits with disjoint identities.

    Output is a pure function of the arguments.
    """
    w, h, c = geometry
    if num_identities_per_split < 2:
        raise ConfigError(f"need at least 2 identities per split, got {num_identities_per_split}")
    if samples_per_identity < 2:
        raise ConfigError(f"need at least 2 samples per identity, got {samples_per_identity}")
    if w < 16 or h < 16 or c < 1:
        raise ConfigError(f"geometry {geometry} too small (need W, H >= 16)")
    geometry = (int(w), int(h), int(c))
    private = _generate_split("private", num_identities_per_split, samples_per_identity, geometry, seed)
    public = _generate_split("public", num_identities_per_split, samples_per_identity, geometry, seed)
    provenance = {
        "seed": int(seed),
        "num_identities": int(num_identities_per_split),
        "samples_per_identity": int(samples_per_identity),
        "perturbation": {"max_shift": MAX_SHIFT, "noise_sigma": NOISE_SIGMA, "brightness": BRIGHTNESS},
    }
    n = num_identities_per_split
    bundle = DatasetBundle(private, public, list(range(n)), list(range(n, 2 * n)), geometry, provenance)
    bundle.validate()
    return bundle


def split_train_test(batch: ImageBatch, test_per_identity: int) -> tuple[ImageBatch, ImageBatch]:
    """Hold out the last ``test_per_identity`` samples of every identity."""
    test_mask = np.zeros(len(batch), dtype=bool)
    for lab in np.unique(batch.labels):
        members = np.flatnonzero(batch.labels == lab)
        if members.size <= test_per_identity:
            raise ConfigError(f"identity {lab} has {members.size} samples, cannot hold out {test_per_identity}")
        test_mask[members[-test_per_identity:]] = True
    return batch.subset(~test_mask), batch.subset(test_mask)


def channel_means(batch: ImageBatch) -> tuple[float, ...]:
    return tuple(float(m) for m in batch.data.mean(axis=(0, 2, 3), dtype=np.float64))


# --- file format -----------------------------------------------------------

def save_split(batch: ImageBatch, path, role: str, num_identities: int, provenance: dict[str, Any],
               identities: Optional[list[int]] = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, c, h, w = batch.data.shape
    meta = {
        "width": w,
        "height": h,
        "channels": c,
        "num_identities": int(num_identities),
        "samples_per_identity": provenance.get("samples_per_identity"),
        "seed": provenance.get("seed"),
        "role": role,
        "format_version": FORMAT_VERSION,
    }
    if identities is not None:
        meta["identities"] = [int(i) for i in identities]
    if "perturbation" in provenance:
        meta["perturbation"] = provenance["perturbation"]
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    batch.data.astype("<f4", copy=False).tofile(path / "images.bin")
    batch.labels.astype("<u4").tofile(path / "labels.bin")


def load_split(path) -> tuple[ImageBatch, dict[str, Any]]:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise FormatError(f"missing {e.filename}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt meta.json in {path}: {e}") from e
    for key in ("width", "height", "channels", "num_identities", "role", "format_version"):
        if key not in meta:
            raise FormatError(f"meta.json in {path} lacks {key!r}")
    if meta["format_version"] != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {meta['format_version']}")
    w, h, c = meta["width"], meta["height"], meta["channels"]
    img_file, lab_file = path / "images.bin", path / "labels.bin"
    for f in (img_file, lab_file):
        if not f.exists():
            raise FormatError(f"missing {f}")
    lab_bytes = os.path.getsize(lab_file)
    if lab_bytes % 4:
        raise FormatError(f"labels.bin length {lab_bytes} is not a multiple of 4")
    n = lab_bytes // 4
    expected = n * c * h * w * 4
    actual = os.path.getsize(img_file)
    if actual != expected:
        raise FormatError(f"images.bin: expected {expected} bytes, found {actual}")
    data = np.fromfile(img_file, dtype="<f4").reshape(n, c, h, w).astype(np.float32)
    labels = np.fromfile(lab_file, dtype="<u4").astype(np.int64)
    batch = ImageBatch(data, labels)
    _validate_split(meta["role"], batch, meta["num_identities"], (w, h, c))
    return batch, meta


def save_dataset(bundle: DatasetBundle, path) -> None:
    """Write ``path/private`` and ``path/public`` split directories."""
    path = Path(path)
    save_split(bundle.private, path / "private", "private", len(bundle.private_identities),
               bundle.provenance, bundle.private_identities)
    save_split(bundle.public, path / "public", "public", len(bundle.public_identities),
               bundle.provenance, bundle.public_identities)


def load_dataset(path) -> DatasetBundle:
    path = Path(path)
    private, pmeta = load_split(path / "private")
    public, qmeta = load_split(path / "public")
    geometry = (pmeta["width"], pmeta["height"], pmeta["channels"])
    if (qmeta["width"], qmeta["height"], qmeta["channels"]) != geometry:
        raise FormatError("private and public splits have different geometry")
    provenance = {
        "seed": pmeta.get("seed"),
        "num_identities": pmeta["num_identities"],
        "samples_per_identity": pmeta.get("samples_per_identity"),
    }
    if "perturbation" in pmeta:
        provenance["perturbation"] = pmeta["perturbation"]
    bundle = DatasetBundle(
        private, public,
        pmeta.get("identities", list(range(pmeta["num_identities"]))),
        qmeta.get("identities", list(range(pmeta["num_identities"], pmeta["num_identities"] + qmeta["num_identities"]))),
        geometry, provenance)
    bundle.validate()
    return bundle
