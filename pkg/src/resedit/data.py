"""Dataset ingestion, balancing, and the synthetic paired-attribute corpus.

The attribute index follows the CelebA text layout: a count line, a names
line, then one row per image of "id +/-1 ...".  Values are stored as {0, 1}.

The synthetic corpus renders flat-shaded procedural faces (ellipse head, two
eyes, nose, mouth) in 8-bit color with no anti-aliasing, so each sample's
positive/negative pair differs on an exactly known pixel mask.  That mask is
what makes ground-truth oracles possible: the real datasets have no paired
before/after images.

Indices and samples are immutable; loading may run with any degree of read
parallelism.  Batch hand-off to the trainer is stateless per iteration, so
resumed runs see the identical batch sequence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .datamodel import derive_seed

SYNTH_KINDS = ("glasses-like", "mouth-like")
LANDMARK_NAMES = ("left_eye", "right_eye", "nose", "mouth_left", "mouth_right")


class AttributeIndexParseError(ValueError):
    """Malformed attribute index file; carries the offending line number."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class DataExhaustedError(RuntimeError):
    """A without-replacement pool ran out of fresh images."""


@dataclass(frozen=True)
class AttributeIndex:
    """Ordered attribute names plus one {0, 1} vector per source id."""

    names: tuple
    rows: dict

    def __post_init__(self):
        for sid, values in self.rows.items():
            if len(values) != len(self.names):
                raise ValueError(f"row {sid!r} has {len(values)} values for "
                                 f"{len(self.names)} attributes")

    @property
    def ids(self) -> tuple:
        return tuple(self.rows)

    def column(self, attribute: str) -> np.ndarray:
        if attribute not in self.names:
            raise KeyError(f"unknown attribute {attribute!r}; index has {list(self.names)}")
        j = self.names.index(attribute)
        return np.array([values[j] for values in self.rows.values()], dtype=np.int64)

    def ids_with_value(self, attribute: str, value: int) -> list:
        j = self.names.index(attribute) if attribute in self.names else None
        if j is None:
            raise KeyError(f"unknown attribute {attribute!r}")
        return [sid for sid, values in self.rows.items() if values[j] == value]


def parse_attribute_index(source) -> AttributeIndex:
    """Parse CelebA-format attribute text (a path, file object, or string)."""
    if hasattr(source, "read"):
        text = source.read()
    elif isinstance(source, Path):
        text = source.read_text()
    else:
        text = str(source)
        if "\n" not in text and Path(text).exists():
            text = Path(text).read_text()
    lines = text.splitlines()
    if len(lines) < 2:
        raise AttributeIndexParseError("expected a count line and a names line", 1)
    try:
        declared = int(lines[0].split()[0])
    except (ValueError, IndexError):
        raise AttributeIndexParseError(f"first line must be a row count, got {lines[0]!r}", 1)
    names = tuple(lines[1].split())
    if not names:
        raise AttributeIndexParseError("names line is empty", 2)

    rows = {}
    for line_number, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        tokens = line.split()
        sid, values = tokens[0], tokens[1:]
        if len(values) != len(names):
            raise AttributeIndexParseError(
                f"row {sid!r} has {len(values)} values, expected {len(names)}", line_number)
        parsed = []
        for tok in values:
            if tok == "1":
                parsed.append(1)
            elif tok == "-1":
                parsed.append(0)
            else:
                raise AttributeIndexParseError(
                    f"attribute value must be 1 or -1, got {tok!r}", line_number)
        if sid in rows:
            raise AttributeIndexParseError(f"duplicate source id {sid!r}", line_number)
        rows[sid] = tuple(parsed)
    if len(rows) != declared:
        raise AttributeIndexParseError(
            f"header declares {declared} rows but file has {len(rows)}", 1)
    return AttributeIndex(names=names, rows=rows)


def format_attribute_index(index: AttributeIndex) -> str:
    """Serialize back to the CelebA text layout ({0,1} maps to {-1,1})."""
    lines = [str(len(index.rows)), " ".join(index.names)]
    for sid, values in index.rows.items():
        lines.append(" ".join([sid] + ["1" if v else "-1" for v in values]))
    return "\n".join(lines) + "\n"


def preprocess(raw, target_size: int) -> torch.Tensor:
    """Center square crop, bilinear resize, and map 8-bit pixels to [-1, 1].

    Accepts a PIL image or an (H, W, 3) uint8 array; returns (1, 3, S, S).
    """
    if isinstance(raw, np.ndarray):
        img = Image.fromarray(raw)
    else:
        img = raw
    img = img.convert("RGB")
    w, h = img.size
    side = min(w, h)
    if side < target_size:
        raise ValueError(f"image {w}x{h} too small for target size {target_size}")
    left = (w - side) // 2
    top = (h - side) // 2
    img = img.crop((left, top, left + side, top + side))
    if side != target_size:
        img = img.resize((target_size, target_size), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr.transpose(2, 0, 1)).unsqueeze(0)


def tensor_from_uint8(arr: np.ndarray) -> torch.Tensor:
    """(H, W, 3) uint8 -> (1, 3, H, W) float in [-1, 1]."""
    return torch.from_numpy(arr.astype(np.float32).transpose(2, 0, 1) / 127.5 - 1.0).unsqueeze(0)


def tensor_to_uint8(x: torch.Tensor) -> np.ndarray:
    """(1, 3, H, W) or (3, H, W) in [-1, 1] -> (H, W, 3) uint8."""
    if x.ndim == 4:
        x = x[0]
    arr = x.detach().cpu().numpy().transpose(1, 2, 0)
    return np.clip(np.round((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)


def make_test_split(index: AttributeIndex, attribute: str, n_per_class: int,
                    seed: int) -> tuple:
    """Draw n_per_class held-out ids from each class, deterministically."""
    neg = index.ids_with_value(attribute, 0)
    pos = index.ids_with_value(attribute, 1)
    if len(neg) < n_per_class or len(pos) < n_per_class:
        raise ValueError(f"need {n_per_class} per class, have {len(neg)} negative "
                         f"and {len(pos)} positive for {attribute!r}")
    rng = np.random.default_rng(derive_seed(seed, "test-split", attribute))
    neg_ids = sorted(rng.choice(neg, size=n_per_class, replace=False).tolist())
    pos_ids = sorted(rng.choice(pos, size=n_per_class, replace=False).tolist())
    return neg_ids, pos_ids


def make_balanced_training_split(index: AttributeIndex, attribute: str,
                                 test_ids, seed: int = 0) -> tuple:
    """Class-balance the non-test images.

    Keeps every minority-class image and an equal-sized seeded uniform draw
    from the majority class.  Test ids never appear in the result.
    """
    excluded = set(test_ids)
    neg = [s for s in index.ids_with_value(attribute, 0) if s not in excluded]
    pos = [s for s in index.ids_with_value(attribute, 1) if s not in excluded]
    if not neg or not pos:
        raise ValueError(f"attribute {attribute!r} has an empty class after "
                         f"excluding test ids ({len(neg)} negative, {len(pos)} positive)")
    k = min(len(neg), len(pos))
    rng = np.random.default_rng(derive_seed(seed, "balance", attribute))

    def _take(ids):
        if len(ids) == k:
            return list(ids)
        chosen = rng.choice(len(ids), size=k, replace=False)
        return [ids[i] for i in sorted(chosen)]

    return _take(neg), _take(pos)


def attribute_correlation(index: AttributeIndex, attr_a: str, attr_b: str) -> float:
    """Pearson correlation between two binary attribute columns."""
    a = index.column(attr_a).astype(np.float64)
    b = index.column(attr_b).astype(np.float64)
    for name, col in ((attr_a, a), (attr_b, b)):
        if col.min() == col.max():
            raise ValueError(f"attribute {name!r} is constant; correlation undefined")
    da = a - a.mean()
    db = b - b.mean()
    return float((da * db).sum() / np.sqrt((da * da).sum() * (db * db).sum()))


# ---------------------------------------------------------------------------
# synthetic paired-attribute corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSample:
    """A rendered face pair differing only on the attribute mask.

    ``landmarks`` holds ground-truth (x, y) pixel coordinates for
    left_eye, right_eye, nose, mouth_left, mouth_right; the renderer knows
    them exactly, which is what the evaluation oracles feed on.
    """

    image_neg: torch.Tensor   # (1, 3, S, S), attribute absent
    image_pos: torch.Tensor   # (1, 3, S, S), attribute present
    mask: np.ndarray          # (S, S) bool, True exactly where the pair differs
    seed: int
    sample_id: str = ""
    landmarks: dict = field(default_factory=dict)


def _fill_ellipse(img, cx, cy, rx, ry, color, clip=None):
    s = img.shape[0]
    ys, xs = np.mgrid[0:s, 0:s]
    region = ((xs + 0.5 - cx) / rx) ** 2 + ((ys + 0.5 - cy) / ry) ** 2 <= 1.0
    if clip is not None:
        region &= clip
    img[region] = color
    return region


def _fill_rect(img, x0, x1, y0, y1, color, clip=None):
    s = img.shape[0]
    ys, xs = np.mgrid[0:s, 0:s]
    region = (xs + 0.5 >= x0) & (xs + 0.5 <= x1) & (ys + 0.5 >= y0) & (ys + 0.5 <= y1)
    if clip is not None:
        region &= clip
    img[region] = color
    return region


def _render_pair(rng: np.random.Generator, s: int, kind: str):
    u = rng.uniform

    def color(*ranges):
        return np.array([np.clip(round(u(lo, hi) * 255), 0, 255) for lo, hi in ranges],
                        dtype=np.uint8)

    bg = color((0.55, 0.9), (0.55, 0.9), (0.6, 0.95))
    skin = color((0.72, 0.9), (0.55, 0.72), (0.42, 0.6))
    base = np.empty((s, s, 3), dtype=np.uint8)
    base[:] = bg

    # background clutter: mid-tone flat shapes (kept above the darkness
    # threshold the landmark detectors key on)
    for _ in range(rng.integers(6, 13)):
        shape_color = color((0.35, 0.75), (0.35, 0.75), (0.35, 0.75))
        sx, sy = u(0, 1) * s, u(0, 1) * s
        if rng.integers(0, 2):
            _fill_rect(base, sx, sx + u(0.04, 0.18) * s, sy, sy + u(0.04, 0.18) * s,
                       shape_color)
        else:
            _fill_ellipse(base, sx, sy, u(0.02, 0.1) * s, u(0.02, 0.1) * s, shape_color)

    cx = (0.5 + u(-0.03, 0.03)) * s
    cy = (0.52 + u(-0.03, 0.03)) * s
    head_ax = u(0.28, 0.34) * s
    head_ay = u(0.36, 0.42) * s
    head = _fill_ellipse(base, cx, cy, head_ax, head_ay, skin)

    # facial speckle: small skin-tone variations shared by both pair members
    speckle_color = (skin.astype(np.int64) * rng.integers(85, 93) // 100).astype(np.uint8)
    for _ in range(rng.integers(20, 41)):
        px = cx + u(-1, 1) * head_ax
        py = cy + u(-1, 1) * head_ay
        size = u(0.01, 0.025) * s
        _fill_rect(base, px, px + size, py, py + size, speckle_color, clip=head)

    eye_dx = u(0.12, 0.16) * s
    eye_dy = u(0.10, 0.14) * s
    eye_y = cy - eye_dy
    sclera = color((0.9, 0.96), (0.9, 0.96), (0.92, 0.98))
    pupil = color((0.02, 0.1), (0.02, 0.1), (0.05, 0.14))
    sclera_rx, sclera_ry = u(0.045, 0.06) * s, u(0.028, 0.04) * s
    pupil_r = u(0.014, 0.022) * s
    for ex in (cx - eye_dx, cx + eye_dx):
        _fill_ellipse(base, ex, eye_y, sclera_rx, sclera_ry, sclera)
        _fill_ellipse(base, ex, eye_y, pupil_r, pupil_r, pupil)

    nose_y = cy + u(0.02, 0.05) * s
    nose_color = (skin.astype(np.int64) * 3 // 4).astype(np.uint8)
    _fill_ellipse(base, cx, nose_y, u(0.02, 0.03) * s, u(0.025, 0.04) * s, nose_color)

    mouth_y = cy + u(0.17, 0.21) * s
    mouth_hw = u(0.08, 0.11) * s
    mouth_color = color((0.4, 0.55), (0.05, 0.12), (0.08, 0.16))
    landmarks = {
        "left_eye": (cx - eye_dx, eye_y),
        "right_eye": (cx + eye_dx, eye_y),
        "nose": (cx, nose_y),
        "mouth_left": (cx - mouth_hw, mouth_y),
        "mouth_right": (cx + mouth_hw, mouth_y),
    }

    if kind == "glasses-like":
        # mouth drawn identically in both images; the glasses are the toggle
        _fill_rect(base, cx - mouth_hw, cx + mouth_hw,
                   mouth_y - u(0.008, 0.014) * s, mouth_y + u(0.008, 0.014) * s, mouth_color)
        neg = base
        pos = base.copy()
        frame_color = color((0.03, 0.12), (0.03, 0.12), (0.05, 0.15))
        # eyeglass frames: elliptical rings, so the eyes stay visible
        lens_rx = u(0.085, 0.105) * s
        lens_ry = u(0.06, 0.075) * s
        thickness = u(0.018, 0.028) * s
        ys_grid, xs_grid = np.mgrid[0:s, 0:s]
        for ex in (cx - eye_dx, cx + eye_dx):
            outer = (((xs_grid + 0.5 - ex) / lens_rx) ** 2
                     + ((ys_grid + 0.5 - eye_y) / lens_ry) ** 2) <= 1.0
            inner = (((xs_grid + 0.5 - ex) / max(lens_rx - thickness, 1.0)) ** 2
                     + ((ys_grid + 0.5 - eye_y) / max(lens_ry - thickness, 1.0)) ** 2) <= 1.0
            pos[outer & ~inner] = frame_color
        bridge_h = max(1.0, u(0.008, 0.014) * s)
        _fill_rect(pos, cx - eye_dx, cx + eye_dx,
                   eye_y - bridge_h, eye_y + bridge_h, frame_color)
        arm_h = max(1.0, u(0.006, 0.012) * s)
        _fill_rect(pos, 0, cx - eye_dx, eye_y - arm_h, eye_y + arm_h, frame_color, clip=head)
        _fill_rect(pos, cx + eye_dx, s, eye_y - arm_h, eye_y + arm_h, frame_color, clip=head)
    elif kind == "mouth-like":
        neg = base.copy()
        pos = base.copy()
        line_hh = u(0.008, 0.014) * s
        _fill_rect(neg, cx - mouth_hw, cx + mouth_hw,
                   mouth_y - line_hh, mouth_y + line_hh, mouth_color)
        open_color = color((0.2, 0.3), (0.03, 0.08), (0.05, 0.1))
        _fill_ellipse(pos, cx, mouth_y, mouth_hw, u(0.035, 0.05) * s, open_color)
    else:
        raise ValueError(f"attribute_kind must be one of {SYNTH_KINDS}, got {kind!r}")

    mask = np.any(neg != pos, axis=2)
    return neg, pos, mask, landmarks


def synth_generate(n: int, image_size: int, attribute_kind: str, seed: int) -> list:
    """Render n deterministic face pairs for the given attribute kind."""
    if image_size % 32:
        raise ValueError(f"image_size must be divisible by 32, got {image_size}")
    if attribute_kind not in SYNTH_KINDS:
        raise ValueError(f"attribute_kind must be one of {SYNTH_KINDS}, got {attribute_kind!r}")
    samples = []
    for i in range(n):
        sample_seed = derive_seed(seed, "synth", attribute_kind, image_size, i)
        rng = np.random.default_rng(sample_seed)
        neg, pos, mask, landmarks = _render_pair(rng, image_size, attribute_kind)
        samples.append(SynthSample(
            image_neg=tensor_from_uint8(neg),
            image_pos=tensor_from_uint8(pos),
            mask=mask,
            seed=sample_seed,
            sample_id=f"synth-{attribute_kind}-{seed}-{i:05d}",
            landmarks=landmarks,
        ))
    return samples


def export_synth_dataset(samples, out_dir) -> Path:
    """Write image pairs, masks, and a manifest JSON to a directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sample in enumerate(samples):
        stem = f"{i:05d}"
        Image.fromarray(tensor_to_uint8(sample.image_neg)).save(out_dir / f"neg_{stem}.png")
        Image.fromarray(tensor_to_uint8(sample.image_pos)).save(out_dir / f"pos_{stem}.png")
        Image.fromarray((sample.mask.astype(np.uint8) * 255)).save(out_dir / f"mask_{stem}.png")
        entries.append({
            "index": i,
            "sample_id": sample.sample_id,
            "seed": sample.seed,
            "landmarks": {k: list(v) for k, v in sample.landmarks.items()},
        })
    size = samples[0].image_neg.shape[-1] if samples else 0
    manifest = {"n": len(samples), "image_size": size, "samples": entries}
    (out_dir / "dataset.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out_dir


def load_synth_dataset(path) -> list:
    """Read back a directory written by :func:`export_synth_dataset`."""
    path = Path(path)
    manifest = json.loads((path / "dataset.json").read_text())
    samples = []
    for entry in manifest["samples"]:
        stem = f"{entry['index']:05d}"
        neg = np.asarray(Image.open(path / f"neg_{stem}.png").convert("RGB"))
        pos = np.asarray(Image.open(path / f"pos_{stem}.png").convert("RGB"))
        mask = np.asarray(Image.open(path / f"mask_{stem}.png")) > 127
        samples.append(SynthSample(
            image_neg=tensor_from_uint8(neg),
            image_pos=tensor_from_uint8(pos),
            mask=mask,
            seed=entry["seed"],
            sample_id=entry["sample_id"],
            landmarks={k: tuple(v) for k, v in entry["landmarks"].items()},
        ))
    return samples


# ---------------------------------------------------------------------------
# training pools
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairedImagePools:
    """Stacked class pools feeding the trainer.

    Batch composition is a pure function of (seed, iteration), so resuming a
    run replays the exact batch sequence.  With replacement disabled, each
    class is consumed along one seeded permutation and exhaustion raises.
    """

    negatives: torch.Tensor  # (N, 3, H, W)
    positives: torch.Tensor  # (M, 3, H, W)
    with_replacement: bool = True

    def __post_init__(self):
        if self.negatives.shape[0] == 0 or self.positives.shape[0] == 0:
            raise ValueError("both class pools must be nonempty")
        if self.negatives.shape[1:] != self.positives.shape[1:]:
            raise ValueError("class pools must share image shape")

    @classmethod
    def from_synth_samples(cls, samples, with_replacement: bool = True) -> "PairedImagePools":
        """Unpaired pools: negatives from the first half, positives from the
        second, so no training batch ever sees both sides of one pair."""
        if len(samples) < 2:
            raise ValueError("need at least 2 samples to build unpaired pools")
        half = len(samples) // 2
        neg = torch.cat([s.image_neg for s in samples[:half]])
        pos = torch.cat([s.image_pos for s in samples[half:]])
        return cls(negatives=neg, positives=pos, with_replacement=with_replacement)

    def sample_batch(self, seed: int, iteration: int, batch_size: int) -> tuple:
        if self.with_replacement:
            rng = np.random.default_rng(derive_seed(seed, "batch", iteration))
            ineg = rng.integers(0, self.negatives.shape[0], size=batch_size)
            ipos = rng.integers(0, self.positives.shape[0], size=batch_size)
        else:
            start, end = iteration * batch_size, (iteration + 1) * batch_size
            if end > self.negatives.shape[0] or end > self.positives.shape[0]:
                raise DataExhaustedError(
                    f"iteration {iteration} needs images [{start}, {end}) but pools hold "
                    f"{self.negatives.shape[0]} negative / {self.positives.shape[0]} positive")
            perm_n = np.random.default_rng(derive_seed(seed, "perm-neg")).permutation(
                self.negatives.shape[0])
            perm_p = np.random.default_rng(derive_seed(seed, "perm-pos")).permutation(
                self.positives.shape[0])
            ineg, ipos = perm_n[start:end], perm_p[start:end]
        return self.negatives[ineg].clone(), self.positives[ipos].clone()
