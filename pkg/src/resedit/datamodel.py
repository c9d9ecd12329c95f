"""Core records, configuration, and checkpoint container.

Images live in float tensors of shape (batch, 3, H, W) with values in
[-1, 1]; 8-bit pixels map linearly via v / 127.5 - 1.  Residual images use
the same layout but are never range-clamped.  All records here are immutable
after construction and safe to share read-only across threads.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

GAN_LOSS_MODES = ("target-class", "paper-literal")

LOCAL_ALPHA = 5e-4
GLOBAL_ALPHA = 1e-6

CHECKPOINT_FORMAT_VERSION = 1
_ARRAY_FILES = {"g0": "g0.arrays", "g1": "g1.arrays", "d": "d.arrays"}
_META_FILE = "meta.json"


class CheckpointError(RuntimeError):
    """Checkpoint directory missing, corrupt, or from an incompatible format."""


class ConfigError(ValueError):
    """A training configuration violates its invariants."""


def validate_image(x: torch.Tensor, *, spatial_divisor: int = 1, name: str = "image") -> torch.Tensor:
    """Check the (batch, 3, H, W) layout, the [-1, 1] range, and divisibility.

    Returns the tensor unchanged so calls can be inlined.
    """
    if not isinstance(x, torch.Tensor):
        raise TypeError(f"{name} must be a torch.Tensor, got {type(x).__name__}")
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"{name} must have shape (batch, 3, H, W), got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")
    if x.min() < -1.0 or x.max() > 1.0:
        raise ValueError(f"{name} values must lie in [-1, 1], got range "
                         f"[{x.min().item():.4g}, {x.max().item():.4g}]")
    h, w = x.shape[2], x.shape[3]
    if h % spatial_divisor or w % spatial_divisor:
        raise ValueError(f"{name} spatial size {h}x{w} must be divisible by {spatial_divisor}")
    return x


def validate_residual(r: torch.Tensor, *, name: str = "residual") -> torch.Tensor:
    """Residuals share the image layout but carry no range constraint."""
    if not isinstance(r, torch.Tensor):
        raise TypeError(f"{name} must be a torch.Tensor, got {type(r).__name__}")
    if r.ndim != 4 or r.shape[1] != 3:
        raise ValueError(f"{name} must have shape (batch, 3, H, W), got {tuple(r.shape)}")
    if not torch.isfinite(r).all():
        raise ValueError(f"{name} contains non-finite values")
    return r


@dataclass(frozen=True)
class LabeledImage:
    """A single image with its binary attribute value.

    label 0 = attribute-negative, 1 = attribute-positive.  Label 2 is
    reserved for generated images and never appears in stored data.
    """

    image: torch.Tensor  # (1, 3, H, W)
    label: int
    source_id: str

    def __post_init__(self):
        validate_image(self.image, name=f"LabeledImage({self.source_id})")
        if self.image.shape[0] != 1:
            raise ValueError("LabeledImage holds exactly one image (batch = 1)")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters for one training run.

    ``beta = 0.1 * alpha`` when built through :func:`default_config`; any
    pair is accepted when constructed directly.  ``width_scale`` shrinks every
    convolution's channel count by the given factor so desk-scale runs fit a
    CPU budget; 1.0 reproduces the full architecture.
    """

    attribute_name: str
    image_size: int = 128
    alpha: float = LOCAL_ALPHA
    beta: float = LOCAL_ALPHA * 0.1
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 64
    iterations: int = 5000
    gan_loss_mode: str = "target-class"
    seed: int = 0
    checkpoint_every: int = 1000
    width_scale: float = 1.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.image_size % 32:
            raise ConfigError(f"image_size must be divisible by 32 "
                              f"(five 2x downsamples in D), got {self.image_size}")
        if self.gan_loss_mode not in GAN_LOSS_MODES:
            raise ConfigError(f"gan_loss_mode must be one of {GAN_LOSS_MODES}, "
                              f"got {self.gan_loss_mode!r}")
        if self.batch_size < 1 or self.iterations < 0 or self.checkpoint_every < 1:
            raise ConfigError("batch_size and checkpoint_every must be >= 1, iterations >= 0")
        if not (0 < self.width_scale <= 1.0):
            raise ConfigError(f"width_scale must lie in (0, 1], got {self.width_scale}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        return cls.from_dict(d)


def default_config(attribute_name: str, scope: str, image_size: int = 128) -> TrainConfig:
    """Default hyper-parameters for a local or global attribute edit.

    Local attributes (glasses, beard, mouth, smile) use alpha = 5e-4; global
    ones (male, young) use alpha = 1e-6.  beta is always 0.1 * alpha and the
    learning rate 2e-4 for every network.
    """
    if scope == "local":
        alpha = LOCAL_ALPHA
    elif scope == "global":
        alpha = GLOBAL_ALPHA
    else:
        raise ConfigError(f"scope must be 'local' or 'global', got {scope!r}")
    return TrainConfig(
        attribute_name=attribute_name,
        image_size=image_size,
        alpha=alpha,
        beta=0.1 * alpha,
        batch_size=64 if image_size >= 128 else 16,
    )


@dataclass(frozen=True)
class Checkpoint:
    """Named parameter arrays for G0, G1, and D plus a metadata document.

    Arrays are plain numpy arrays keyed by parameter name; optimizer moments
    ride along under an ``optimizer/`` key prefix so training can resume
    exactly.  Round-tripping through :func:`save_checkpoint` and
    :func:`load_checkpoint` reproduces every array bit-exactly.
    """

    g0: dict
    g1: dict
    d: dict
    meta: dict

    @property
    def iteration(self) -> int:
        return int(self.meta["iteration"])

    @property
    def config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.meta["config"])


def rng_digest(seed: int, iteration: int) -> str:
    """Stable digest of the root RNG position recorded in checkpoint metadata."""
    return hashlib.sha256(f"seed={seed}:iteration={iteration}".encode()).hexdigest()[:16]


def derive_seed(root_seed: int, *labels) -> int:
    """Derive an independent 63-bit stream seed from the root seed and labels.

    All randomness in a run funnels through seeds produced here, so a run is
    fully determined by its root seed.
    """
    text = ":".join([str(root_seed), *map(str, labels)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


def _write_arrays(path: Path, arrays: dict) -> None:
    for k, v in arrays.items():
        if not isinstance(v, np.ndarray):
            raise TypeError(f"checkpoint array {k!r} must be a numpy array, got {type(v).__name__}")
    # np.savez appends ".npz" to bare paths but leaves file objects alone,
    # which keeps the mandated "*.arrays" names intact.
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def _read_arrays(path: Path) -> dict:
    if not path.is_file():
        raise CheckpointError(f"missing checkpoint file: {path}")
    try:
        with np.load(path) as z:
            return {k: z[k] for k in z.files}
    except Exception as e:
        raise CheckpointError(f"corrupt checkpoint file {path}: {e}") from e


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Write a checkpoint directory {g0.arrays, g1.arrays, d.arrays, meta.json}."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = dict(ckpt.meta)
    meta.setdefault("format_version", CHECKPOINT_FORMAT_VERSION)
    for part, fname in _ARRAY_FILES.items():
        _write_arrays(path / fname, getattr(ckpt, part))
    (path / _META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Load a checkpoint directory; raises CheckpointError rather than
    returning partial state."""
    path = Path(path)
    meta_path = path / _META_FILE
    if not path.is_dir() or not meta_path.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint metadata {meta_path}: {e}") from e
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version!r} not supported "
                              f"(expected {CHECKPOINT_FORMAT_VERSION})")
    parts = {part: _read_arrays(path / fname) for part, fname in _ARRAY_FILES.items()}
    return Checkpoint(g0=parts["g0"], g1=parts["g1"], d=parts["d"], meta=meta)


def state_dict_to_arrays(state: dict) -> dict:
    """torch state dict -> named numpy arrays (shared-memory views are copied)."""
    return {k: v.detach().cpu().numpy().copy() for k, v in state.items()}


def arrays_to_state_dict(arrays: dict) -> dict:
    return {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
