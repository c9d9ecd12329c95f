"""Inference, residual inspection, and the landmark-detection-gain protocol.

The landmark metric follows the standard normalization: each point's
Euclidean detection error is divided by the ground-truth inter-ocular
distance.  "Eye landmarks" are the two eye points; "rest landmarks" are the
nose and the two mouth corners.

Three detector implementations satisfy the same single-image contract:

* ``SyntheticOracleDetector`` finds landmarks in rendered faces directly
  from pixel content (dark-region centroids), so wearing glasses degrades
  it organically.
* ``NoisyOracleDetector`` perturbs registered ground truth with zero-mean
  noise whose magnitude grows with dark-pixel coverage around each
  landmark.  It is pure: the noise is a deterministic function of the image
  content, so identical images always yield identical detections.
* ``ExternalDetector`` adapts any external tool speaking a line protocol:
  one image path per line on stdin, one JSON object of name -> [x, y]
  per line on stdout.

Per-image evaluation is embarrassingly parallel; aggregation happens in a
single reduction at the end.
"""

from __future__ import annotations

import hashlib
import json
import math
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .datamodel import Checkpoint, validate_image, validate_residual
from .data import tensor_to_uint8
from .networks import compose
from .trainer import models_from_checkpoint

EYE_LANDMARKS = ("left_eye", "right_eye")
REST_LANDMARKS = ("nose", "mouth_left", "mouth_right")
DIRECTIONS = ("0to1", "1to0")
GROUPS = ("D0", "D1", "D1m")

# Published reference results for the glasses-removal protocol; shown next to
# computed numbers for orientation only, never asserted against.
REFERENCE_EYE_ERRORS = {"D0": 0.02341, "D1": 0.03570, "D1m": 0.03048}
REFERENCE_REST_ERRORS = {"D0": 0.04424, "D1": 0.04605, "D1m": 0.04608}


class DetectorFailure(RuntimeError):
    """A landmark detector could not produce points for an image."""


@dataclass(frozen=True)
class LandmarkSet:
    """Named (x, y) pixel coordinates for one image."""

    points: dict
    role: str = "truth"  # or "detected"

    def __post_init__(self):
        for name, (x, y) in self.points.items():
            if not (math.isfinite(x) and math.isfinite(y)) or x < 0 or y < 0:
                raise ValueError(f"landmark {name!r} has invalid coordinates ({x}, {y})")

    def scaled(self, factor: float) -> "LandmarkSet":
        return LandmarkSet({k: (x * factor, y * factor) for k, (x, y) in self.points.items()},
                           role=self.role)


@dataclass(frozen=True)
class EvalRecord:
    """Per-image normalized landmark distances."""

    source_id: str
    distances: dict
    group: str

    def mean_over(self, names) -> float:
        vals = [self.distances[n] for n in names if n in self.distances]
        if not vals:
            raise ValueError(f"record {self.source_id} has none of {names}")
        return sum(vals) / len(vals)


def interocular_distance(truth: LandmarkSet) -> float:
    try:
        (lx, ly), (rx, ry) = (truth.points[n] for n in EYE_LANDMARKS)
    except KeyError as e:
        raise ValueError(f"truth set is missing eye landmark {e}") from e
    return math.hypot(rx - lx, ry - ly)


def normalized_landmark_error(detected: LandmarkSet, truth: LandmarkSet) -> dict:
    """Per-point Euclidean distance divided by the truth inter-ocular distance."""
    if set(detected.points) != set(truth.points):
        raise ValueError(f"point names differ: {sorted(detected.points)} vs "
                         f"{sorted(truth.points)}")
    norm = interocular_distance(truth)
    if norm <= 0:
        raise ValueError("truth inter-ocular distance must be positive")
    out = {}
    for name, (tx, ty) in truth.points.items():
        dx, dy = detected.points[name]
        out[name] = math.hypot(dx - tx, dy - ty) / norm
    return out


def manipulate(model, x: torch.Tensor, direction: str, *,
               residual: bool | None = None) -> tuple:
    """Apply one attribute edit; returns (output image, raw residual).

    ``model`` is a Checkpoint or a (g0, g1) pair in eval mode.  The input
    buffer is never modified.  ``residual`` controls whether the network
    output is added to the input (the standard composition) or taken as the
    whole image (models trained in no-residual ablation mode); checkpoints
    remember their own mode, so it normally needs no explicit value.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if isinstance(model, Checkpoint):
        if residual is None:
            residual = model.meta.get("ablation_mode", "full") != "no-residual"
        g0, g1, _ = models_from_checkpoint(model)
    else:
        g0, g1 = model
        if residual is None:
            residual = True
    gen = g0 if direction == "0to1" else g1
    validate_image(x, spatial_divisor=4, name="manipulate input")
    with torch.no_grad():
        r = gen(x)
        out = compose(x, r) if residual else torch.clamp(r, -1.0, 1.0)
    return out, r


def oracle_paired_l1(model, samples, direction: str = "1to0", *,
                     residual_mode: bool = True) -> list:
    """Per-sample (edited-vs-target L1, input-vs-target L1) on synthetic pairs.

    For the removal direction the input is the attribute-positive image and
    the target its ground-truth negative twin; an effective edit drives the
    first number below the second.
    """
    out = []
    for sample in samples:
        if direction == "1to0":
            x, target = sample.image_pos, sample.image_neg
        else:
            x, target = sample.image_neg, sample.image_pos
        edited, _ = manipulate(model, x, direction, residual=residual_mode)
        out.append(((edited - target).abs().mean().item(),
                    (x - target).abs().mean().item()))
    return out


def mean_residual_localization(model, samples, direction: str = "1to0") -> float:
    """Mean fraction of residual mass falling inside the known attribute mask."""
    if not samples:
        raise ValueError("no samples given")
    total = 0.0
    for sample in samples:
        x = sample.image_pos if direction == "1to0" else sample.image_neg
        _, r = manipulate(model, x, direction)
        total += residual_localization(r, sample.mask)
    return total / len(samples)


def residual_localization(r: torch.Tensor, mask: np.ndarray) -> float:
    """Fraction of residual L1 mass inside the mask; 0 when the residual is 0."""
    validate_residual(r)
    m = torch.from_numpy(np.asarray(mask).astype(np.float32))
    if m.shape != r.shape[-2:]:
        raise ValueError(f"mask shape {tuple(m.shape)} does not match residual "
                         f"spatial size {tuple(r.shape[-2:])}")
    mag = r.abs().sum(dim=(0, 1)) if r.ndim == 4 else r.abs().sum(dim=0)
    total = mag.sum().item()
    if total == 0.0:
        return 0.0
    return float((mag * m).sum().item() / total)


# ---------------------------------------------------------------------------
# detectors
# ---------------------------------------------------------------------------

def _image_digest(x: torch.Tensor) -> bytes:
    arr = x.detach().cpu().contiguous().numpy()
    h = hashlib.sha256(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.digest()


def _to_unit(x: torch.Tensor) -> np.ndarray:
    """(1, 3, S, S) in [-1, 1] -> (S, S, 3) float in [0, 1]."""
    return (x[0].detach().cpu().numpy().transpose(1, 2, 0) + 1.0) / 2.0


class SyntheticOracleDetector:
    """Finds landmarks in rendered faces from pixel statistics alone.

    Eyes are centroids of dark pixels in the upper face band (left/right of
    their joint center of mass); the mouth is the dark band in the lower
    face, with corners at its horizontal extremes; the nose is the
    darker-than-skin centroid between them.
    """

    def __init__(self, dark_threshold: float = 0.3):
        self.dark_threshold = dark_threshold

    def detect(self, image: torch.Tensor) -> LandmarkSet:
        arr = _to_unit(image)
        s = arr.shape[0]
        lum = arr.mean(axis=2)
        ys, xs = np.mgrid[0:s, 0:s]

        def centroid(region, what):
            if not region.any():
                raise DetectorFailure(f"no {what} pixels found")
            return float(xs[region].mean()), float(ys[region].mean())

        dark = lum < self.dark_threshold
        upper = dark & (ys < 0.55 * s)
        if not upper.any():
            raise DetectorFailure("no eye-region pixels found")
        split = xs[upper].mean()
        left_eye = centroid(upper & (xs < split), "left-eye")
        right_eye = centroid(upper & (xs >= split), "right-eye")

        lower = dark & (ys >= 0.55 * s)
        if not lower.any():
            raise DetectorFailure("no mouth pixels found")
        mouth_y = float(ys[lower].mean())
        mouth_left = (float(xs[lower].min()), mouth_y)
        mouth_right = (float(xs[lower].max()), mouth_y)

        band = (ys >= 0.5 * s) & (ys < 0.64 * s) & ~dark
        skin_lum = np.median(lum[band]) if band.any() else 1.0
        nose_region = band & (lum < 0.9 * skin_lum)
        nose = centroid(nose_region, "nose")

        return LandmarkSet({
            "left_eye": left_eye, "right_eye": right_eye, "nose": nose,
            "mouth_left": mouth_left, "mouth_right": mouth_right,
        }, role="detected")


class NoisyOracleDetector:
    """Ground truth plus occlusion-sensitive zero-mean noise.

    The caller registers the truth for every image it will query (keyed by
    image content).  At detection time each point's noise scale is
    ``base_sigma_px + occlusion_gain_px * coverage`` where coverage is the
    dark-pixel fraction in a window around the true point, so occluders
    sitting on a landmark directly inflate its detection error.
    """

    def __init__(self, *, base_sigma_px: float = 0.5, occlusion_gain_px: float = 3.0,
                 window_frac: float = 1 / 12, dark_threshold: float = 0.3):
        self.base_sigma_px = base_sigma_px
        self.occlusion_gain_px = occlusion_gain_px
        self.window_frac = window_frac
        self.dark_threshold = dark_threshold
        self._truth = {}

    def register_truth(self, image: torch.Tensor, truth: LandmarkSet) -> None:
        self._truth[_image_digest(image)] = truth

    def occlusion_coverage(self, image: torch.Tensor, point) -> float:
        arr = _to_unit(image)
        s = arr.shape[0]
        lum = arr.mean(axis=2)
        w = max(2, round(s * self.window_frac))
        cx, cy = (int(round(c)) for c in point)
        x0, x1 = max(0, cx - w), min(s, cx + w + 1)
        y0, y1 = max(0, cy - w), min(s, cy + w + 1)
        window = lum[y0:y1, x0:x1]
        if window.size == 0:
            return 0.0
        return float((window < self.dark_threshold).mean())

    def detect(self, image: torch.Tensor) -> LandmarkSet:
        digest = _image_digest(image)
        truth = self._truth.get(digest)
        if truth is None:
            raise DetectorFailure("no registered truth for this image")
        s = image.shape[-1]
        points = {}
        for name, (x, y) in truth.points.items():
            coverage = self.occlusion_coverage(image, (x, y))
            sigma = self.base_sigma_px + self.occlusion_gain_px * coverage
            seed = int.from_bytes(
                hashlib.sha256(digest + name.encode()).digest()[:8], "little")
            rng = np.random.default_rng(seed)
            dx, dy = rng.normal(0.0, sigma, size=2)
            points[name] = (float(np.clip(x + dx, 0, s - 1)),
                            float(np.clip(y + dy, 0, s - 1)))
        return LandmarkSet(points, role="detected")


class ExternalDetector:
    """Adapter for an external landmark tool.

    Protocol: the tool reads one absolute image path per line on stdin and
    answers with one line of JSON mapping landmark names to [x, y] pixel
    coordinates, e.g. ``{"left_eye": [20.5, 25.0], ...}``.
    """

    def __init__(self, command):
        self.command = list(command)
        self._proc = None

    def _ensure_proc(self):
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True)
        return self._proc

    def detect(self, image: torch.Tensor) -> LandmarkSet:
        with tempfile.NamedTemporaryFile(suffix=".png", delete=False) as f:
            Image.fromarray(tensor_to_uint8(image)).save(f.name)
            path = f.name
        try:
            proc = self._ensure_proc()
            try:
                proc.stdin.write(path + "\n")
                proc.stdin.flush()
                line = proc.stdout.readline()
            except (BrokenPipeError, OSError) as e:
                raise DetectorFailure(f"detector process failed: {e}") from e
            if not line.strip():
                raise DetectorFailure("detector returned no output")
            try:
                raw = json.loads(line)
                points = {name: (float(v[0]), float(v[1])) for name, v in raw.items()}
            except (json.JSONDecodeError, TypeError, ValueError, IndexError) as e:
                raise DetectorFailure(f"unparseable detector output {line!r}") from e
            return LandmarkSet(points, role="detected")
        finally:
            Path(path).unlink(missing_ok=True)

    def close(self):
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# landmark-gain protocol
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalImage:
    source_id: str
    image: torch.Tensor
    truth: LandmarkSet


def eval_images_from_synth(samples, side: str) -> list:
    """Turn synthetic samples into evaluation items ('neg' or 'pos' side)."""
    if side not in ("neg", "pos"):
        raise ValueError(f"side must be 'neg' or 'pos', got {side!r}")
    out = []
    for sample in samples:
        image = sample.image_neg if side == "neg" else sample.image_pos
        out.append(EvalImage(source_id=f"{sample.sample_id}:{side}", image=image,
                             truth=LandmarkSet(dict(sample.landmarks))))
    return out


@dataclass(frozen=True)
class GroupStats:
    eye_mean: float
    rest_mean: float
    n_images: int
    n_missing: int


@dataclass(frozen=True)
class LandmarkGainSummary:
    rows: dict            # group -> GroupStats
    records: list         # every EvalRecord that succeeded

    def to_csv(self) -> str:
        lines = ["group,eye_error,rest_error,n_images,n_missing,reference_eye,reference_rest"]
        for group in GROUPS:
            st = self.rows[group]
            lines.append(f"{group},{st.eye_mean:.5f},{st.rest_mean:.5f},{st.n_images},"
                         f"{st.n_missing},{REFERENCE_EYE_ERRORS[group]:.5f},"
                         f"{REFERENCE_REST_ERRORS[group]:.5f}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lines = [
            "Average normalized landmark detection error",
            f"{'group':<6} {'eyes':>10} {'rest':>10} {'images':>8} {'missing':>8}",
        ]
        for group in GROUPS:
            st = self.rows[group]
            lines.append(f"{group:<6} {st.eye_mean:>10.5f} {st.rest_mean:>10.5f} "
                         f"{st.n_images:>8d} {st.n_missing:>8d}")
        lines.append("")
        lines.append("reference values (published full-scale run, for orientation only):")
        lines.append(f"{'group':<6} {'eyes':>10} {'rest':>10}")
        for group in GROUPS:
            lines.append(f"{group:<6} {REFERENCE_EYE_ERRORS[group]:>10.5f} "
                         f"{REFERENCE_REST_ERRORS[group]:>10.5f}")
        return "\n".join(lines) + "\n"

    def save(self, out_dir) -> tuple:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "landmark_summary.csv"
        txt_path = out_dir / "landmark_summary.txt"
        csv_path.write_text(self.to_csv())
        txt_path.write_text(self.to_text())
        return csv_path, txt_path


def landmark_gain_eval(model, d0_set, d1_set, detector, *,
                       direction: str = "1to0") -> LandmarkGainSummary:
    """Score landmark detection on D0, D1, and the manipulated set D1m.

    D1m applies the attribute-removal edit to every D1 image; its ground
    truth is D1's (the face geometry does not move).  Detector failures are
    excluded from the means and counted per group.
    """
    residual = True
    if isinstance(model, Checkpoint):
        residual = model.meta.get("ablation_mode", "full") != "no-residual"
        g0, g1, _ = models_from_checkpoint(model)
        model = (g0, g1)

    d1m_set = []
    for item in d1_set:
        edited, _ = manipulate(model, item.image, direction, residual=residual)
        d1m_set.append(EvalImage(source_id=item.source_id + ":m", image=edited,
                                 truth=item.truth))

    groups = {"D0": d0_set, "D1": d1_set, "D1m": d1m_set}
    if hasattr(detector, "register_truth"):
        for items in groups.values():
            for item in items:
                detector.register_truth(item.image, item.truth)

    records = []
    rows = {}
    for group, items in groups.items():
        eye_means, rest_means, missing = [], [], 0
        for item in items:
            try:
                detected = detector.detect(item.image)
            except DetectorFailure:
                missing += 1
                continue
            distances = normalized_landmark_error(detected, item.truth)
            record = EvalRecord(source_id=item.source_id, distances=distances, group=group)
            records.append(record)
            eye_means.append(record.mean_over(EYE_LANDMARKS))
            rest_means.append(record.mean_over(REST_LANDMARKS))
        if not eye_means:
            raise ValueError(f"group {group} has no successful detections")
        rows[group] = GroupStats(
            eye_mean=sum(eye_means) / len(eye_means),
            rest_mean=sum(rest_means) / len(rest_means),
            n_images=len(eye_means), n_missing=missing)
    return LandmarkGainSummary(rows=rows, records=records)


# ---------------------------------------------------------------------------
# image panels
# ---------------------------------------------------------------------------

def residual_to_display(r: torch.Tensor) -> torch.Tensor:
    """Map a residual symmetrically onto [-1, 1]: zero becomes mid-gray."""
    validate_residual(r if r.ndim == 4 else r.unsqueeze(0))
    peak = r.abs().max()
    if peak == 0:
        return torch.zeros_like(r)
    return r / peak


def export_grid(rows, path) -> Path:
    """Tile rows of same-sized images into one 8-bit PNG."""
    if not rows or not any(len(row) for row in rows):
        raise ValueError("grid needs at least one image")
    widths = {len(row) for row in rows}
    if len(widths) != 1:
        raise ValueError(f"all grid rows need equal length, got {sorted(widths)}")
    tiles = [[tensor_to_uint8(img) for img in row] for row in rows]
    shape = tiles[0][0].shape
    for row in tiles:
        for tile in row:
            if tile.shape != shape:
                raise ValueError(f"inconsistent tile shapes: {tile.shape} vs {shape}")
    grid = np.concatenate([np.concatenate(row, axis=1) for row in tiles], axis=0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid).save(path)
    return path
