"""Procedural clean images, synthetic weather degradations and image metrics.

Images are ``32 x 32 x 3`` float64 arrays in ``[0, 1]``.  Every generator is a
pure function of its seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels

SIZE = 32
KINDS = ("fog", "rain", "snow", "raindrop")
FOG_AIRLIGHT = 0.8
SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CAP = 100.0

DEFAULT_PARAMS: dict[str, dict[str, tuple[float, float]]] = {
    "fog": {"t": (0.3, 0.7)},
    "rain": {"count": (8, 20), "angle": (60.0, 80.0), "intensity": (0.3, 0.6), "length": (8.0, 16.0)},
    "snow": {"count": (10, 30), "radius": (1.0, 2.0), "intensity": (0.6, 1.0)},
    "raindrop": {"count": (3, 8), "radius": (3.0, 6.0), "darken": (0.85, 0.85)},
}


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    """A degradation kind with optional parameter-range overrides.

    ``params`` maps a parameter name to a closed ``(lo, hi)`` range; pass
    ``(x, x)`` to force a value.
    """

    kind: str
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise TaskError(f"unknown degradation kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.kind])
        if unknown:
            raise TaskError(f"{self.kind}: unknown parameter(s) {sorted(unknown)}")
        for name, (lo, hi) in self.resolved().items():
            if lo > hi:
                raise TaskError(f"{self.kind}.{name}: empty range ({lo}, {hi})")

    def resolved(self) -> dict[str, tuple[float, float]]:
        out = dict(DEFAULT_PARAMS[self.kind])
        out.update({k: tuple(v) for k, v in self.params.items()})
        return out

    def with_seed(self, seed: int) -> "TaskSpec":
        return TaskSpec(self.kind, seed, self.params)


class PairedSample(NamedTuple):
    clean: np.ndarray
    degraded: np.ndarray


_YY, _XX = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64) + 0.5


def _disk_coverage(cx, cy, r):
    d = np.hypot(_XX - cx, _YY - cy)
    return np.clip(r + 0.5 - d, 0.0, 1.0)


def _rect_coverage(x0, y0, x1, y1):
    cx = np.clip(np.minimum(_XX + 0.5, x1) - np.maximum(_XX - 0.5, x0), 0.0, 1.0)
    cy = np.clip(np.minimum(_YY + 0.5, y1) - np.maximum(_YY - 0.5, y0), 0.0, 1.0)
    return cx * cy


def gen_clean(seed: int) -> np.ndarray:
    """Two-colour linear gradient with 3-6 anti-aliased rectangles and disks."""
    rng = np.random.default_rng([int(seed), 0x5EED])
    c0, c1 = rng.uniform(0.0, 1.0, size=(2, 3))
    theta = rng.uniform(0.0, 2 * math.pi)
    proj = (_XX - SIZE / 2) * math.cos(theta) + (_YY - SIZE / 2) * math.sin(theta)
    w = (proj / (SIZE * math.sqrt(2)) + 0.5)[..., None]
    img = (1.0 - w) * c0 + w * c1
    for _ in range(rng.integers(3, 7)):
        color = rng.uniform(0.0, 1.0, size=3)
        if rng.random() < 0.5:
            x0, y0 = rng.uniform(-4, SIZE - 4, size=2)
            ww, hh = rng.uniform(4, 16, size=2)
            alpha = _rect_coverage(x0, y0, x0 + ww, y0 + hh)
        else:
            cx, cy = rng.uniform(0, SIZE, size=2)
            alpha = _disk_coverage(cx, cy, rng.uniform(2, 8))
        img = img * (1.0 - alpha[..., None]) + color * alpha[..., None]
    return np.clip(img, 0.0, 1.0)


def _uniform(rng, rng_range):
    lo, hi = rng_range
    return lo if lo == hi else rng.uniform(lo, hi)


def _count(rng, rng_range):
    lo, hi = int(rng_range[0]), int(rng_range[1])
    return lo if lo == hi else int(rng.integers(lo, hi + 1))


def _segment_distance(x0, y0, x1, y1):
    dx, dy = x1 - x0, y1 - y0
    ll = dx * dx + dy * dy
    t = np.clip(((_XX - x0) * dx + (_YY - y0) * dy) / ll, 0.0, 1.0)
    return np.hypot(_XX - (x0 + t * dx), _YY - (y0 + t * dy))


def _box5(img):
    pad = np.pad(img, ((2, 2), (2, 2), (0, 0)), mode="edge")
    return kernels.box_mean(pad, 5)


def degrade(clean: np.ndarray, spec: TaskSpec) -> np.ndarray:
    """Apply ``spec``'s degradation to ``clean``; output is clamped to ``[0, 1]``."""
    clean = np.asarray(clean, dtype=np.float64)
    if clean.shape != (SIZE, SIZE, 3):
        raise TaskError(f"expected a {SIZE}x{SIZE}x3 image, got {clean.shape}")
    prm = spec.resolved()
    rng = np.random.default_rng([int(spec.seed), KINDS.index(spec.kind), 0xDE6])
    if spec.kind == "fog":
        t = _uniform(rng, prm["t"])
        out = t * clean + (1.0 - t) * FOG_AIRLIGHT
    elif spec.kind == "rain":
        out = clean.copy()
        angle = math.radians(_uniform(rng, prm["angle"]))
        for _ in range(_count(rng, prm["count"])):
            length = _uniform(rng, prm["length"])
            inten = _uniform(rng, prm["intensity"])
            x0, y0 = rng.uniform(0, SIZE, size=2)
            x1, y1 = x0 + length * math.cos(angle), y0 + length * math.sin(angle)
            cov = np.clip(1.0 - _segment_distance(x0, y0, x1, y1), 0.0, 1.0)
            out = out + inten * cov[..., None]
    elif spec.kind == "snow":
        out = clean.copy()
        for _ in range(_count(rng, prm["count"])):
            r = _uniform(rng, prm["radius"])
            inten = _uniform(rng, prm["intensity"])
            cx, cy = rng.uniform(0, SIZE, size=2)
            d2 = (_XX - cx) ** 2 + (_YY - cy) ** 2
            out = out + inten * np.exp(-d2 / (r * r))[..., None]
    else:
        blurred = _box5(clean) * _uniform(rng, prm["darken"])
        mask = np.zeros((SIZE, SIZE))
        for _ in range(_count(rng, prm["count"])):
            r = _uniform(rng, prm["radius"])
            cx, cy = rng.uniform(0, SIZE, size=2)
            mask = np.maximum(mask, _disk_coverage(cx, cy, r))
        out = clean * (1.0 - mask[..., None]) + blurred * mask[..., None]
    return np.clip(out, 0.0, 1.0)


def make_pair(kind: str, seed: int) -> PairedSample:
    clean = gen_clean(seed)
    return PairedSample(clean, degrade(clean, TaskSpec(kind, seed)))


def make_batch(kind: str, seeds) -> tuple[np.ndarray, np.ndarray]:
    """Stack ``(clean, degraded)`` pairs for ``seeds`` into two ``b x 32 x 32 x 3`` arrays."""
    pairs = [make_pair(kind, s) for s in seeds]
    return np.stack([p.clean for p in pairs]), np.stack([p.degraded for p in pairs])


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise TaskError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for unit peak; capped at 100 dB."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def ssim(a, b) -> float:
    """Mean SSIM over 8x8 uniform windows (stride 1) and channels.

    Uses population (1/N) window statistics.
    """
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise TaskError(f"image {a.shape[:2]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = SSIM_WINDOW
    stack = np.concatenate([a, b, a * a, b * b, a * b], axis=2)
    mom = kernels.box_mean(np.ascontiguousarray(stack), w)
    c = a.shape[2]
    mu_a, mu_b = mom[..., :c], mom[..., c : 2 * c]
    var_a = mom[..., 2 * c : 3 * c] - mu_a**2
    var_b = mom[..., 3 * c : 4 * c] - mu_b**2
    cov = mom[..., 4 * c :] - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def save_png(path, image: np.ndarray) -> None:
    """Write an image as 8-bit sRGB PNG (values are taken as already sRGB-encoded)."""
    from PIL import Image

    arr = np.round(np.clip(np.asarray(image), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path)
