"""Intensity images, bilinear sampling, and the inverse-depth map.

An image is a (H, W) float64 array; pixel (u, v) reads intensities[v, u]
with the pixel center at integer coordinates. Out-of-bounds samples are
reported through a validity mask (NaN values), never clamped.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

DEPTH_MAGIC = b"IDMAP\x01\x00\x00"


def bilinear_sample(image: np.ndarray, uv: np.ndarray):
    """Bilinearly interpolate at (..., 2) pixel positions.

    Returns (values, valid). Positions outside [0, W-1] x [0, H-1] are
    invalid and get NaN values.
    """
    vals, _, valid = _bilinear_impl(image, uv, want_grad=False)
    return vals, valid


def bilinear_sample_with_gradient(image: np.ndarray, uv: np.ndarray):
    """Values plus the exact gradient of the bilinear interpolant.

    The gradient is d(value)/d(u, v) of the piecewise-bilinear surface,
    so it matches finite differences of `bilinear_sample` away from cell
    boundaries. Returns (values, grads (..., 2), valid).
    """
    return _bilinear_impl(image, uv, want_grad=True)


def _bilinear_impl(image: np.ndarray, uv: np.ndarray, want_grad: bool):
    image = np.asarray(image, dtype=float)
    uv = np.asarray(uv, dtype=float)
    h, w = image.shape
    u, v = uv[..., 0], uv[..., 1]
    valid = (u >= 0.0) & (u <= w - 1.0) & (v >= 0.0) & (v <= h - 1.0)
    valid &= np.isfinite(u) & np.isfinite(v)

    u0 = np.clip(np.floor(u), 0, w - 2).astype(int)
    v0 = np.clip(np.floor(v), 0, h - 2).astype(int)
    fu = np.clip(u - u0, 0.0, 1.0)
    fv = np.clip(v - v0, 0.0, 1.0)
    # out-of-bounds indices are clamped; the mask voids their values below
    u0 = np.where(valid, u0, 0)
    v0 = np.where(valid, v0, 0)

    c00 = image[v0, u0]
    c10 = image[v0, u0 + 1]
    c01 = image[v0 + 1, u0]
    c11 = image[v0 + 1, u0 + 1]

    top = c00 * (1 - fu) + c10 * fu
    bot = c01 * (1 - fu) + c11 * fu
    vals = np.where(valid, top * (1 - fv) + bot * fv, np.nan)

    grads = None
    if want_grad:
        du = (c10 - c00) * (1 - fv) + (c11 - c01) * fv
        dv = (c01 - c00) * (1 - fu) + (c11 - c10) * fu
        grads = np.stack([np.where(valid, du, np.nan), np.where(valid, dv, np.nan)], axis=-1)
    return vals, grads, valid


def image_gradient(image: np.ndarray):
    """Central-difference gradients (gx, gy), replicated at borders."""
    image = np.asarray(image, dtype=float)
    gy, gx = np.gradient(image)
    return gx, gy


def gradient_magnitude(image: np.ndarray) -> np.ndarray:
    gx, gy = image_gradient(image)
    return np.hypot(gx, gy)


def high_gradient_mask(image: np.ndarray, threshold: float) -> np.ndarray:
    """Pixels whose gradient magnitude exceeds the threshold."""
    return gradient_magnitude(image) > threshold


def estimate_noise_sigma(image: np.ndarray) -> float:
    """Robust additive-noise sigma from the difference-of-Laplacians mask.

    The 3x3 mask [[1,-2,1],[-2,4,-2],[1,-2,1]] annihilates locally planar
    intensity, so its response on smooth structure is near zero while iid
    noise passes with variance 36 sigma^2. The median of |response| ignores
    the minority of edge pixels; 0.6745 converts a Gaussian median absolute
    deviation to sigma.
    """
    I = np.asarray(image, dtype=float)
    if I.shape[0] < 3 or I.shape[1] < 3:
        return 0.0
    R = (I[:-2, :-2] + I[:-2, 2:] + I[2:, :-2] + I[2:, 2:]
         - 2.0 * (I[:-2, 1:-1] + I[2:, 1:-1] + I[1:-1, :-2] + I[1:-1, 2:])
         + 4.0 * I[1:-1, 1:-1])
    return float(np.median(np.abs(R)) / (6.0 * 0.6745))


def downsample_half(image: np.ndarray) -> np.ndarray:
    """2x2 block mean; odd trailing rows/columns are dropped."""
    image = np.asarray(image, dtype=float)
    h, w = image.shape
    h2, w2 = h // 2, w // 2
    img = image[: 2 * h2, : 2 * w2]
    return 0.25 * (img[0::2, 0::2] + img[0::2, 1::2] + img[1::2, 0::2] + img[1::2, 1::2])


@dataclass
class InverseDepthMap:
    """Per-pixel inverse-depth mean and variance; NaN marks absent pixels."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.variance = np.asarray(self.variance, dtype=float)
        if self.mean.shape != self.variance.shape:
            raise ValueError("mean/variance shape mismatch")

    @staticmethod
    def empty(height: int, width: int) -> "InverseDepthMap":
        return InverseDepthMap(np.full((height, width), np.nan),
                               np.full((height, width), np.nan))

    def defined_mask(self) -> np.ndarray:
        return np.isfinite(self.mean) & np.isfinite(self.variance)

    def copy(self) -> "InverseDepthMap":
        return InverseDepthMap(self.mean.copy(), self.variance.copy())

    def decimate_half(self) -> "InverseDepthMap":
        """Per 2x2 block keep the minimum-variance sample."""
        h, w = self.mean.shape
        h2, w2 = h // 2, w // 2
        m = self.mean[: 2 * h2, : 2 * w2]
        v = self.variance[: 2 * h2, : 2 * w2]
        m_blocks = np.stack([m[0::2, 0::2], m[0::2, 1::2], m[1::2, 0::2], m[1::2, 1::2]])
        v_blocks = np.stack([v[0::2, 0::2], v[0::2, 1::2], v[1::2, 0::2], v[1::2, 1::2]])
        v_filled = np.where(np.isfinite(v_blocks), v_blocks, np.inf)
        pick = np.argmin(v_filled, axis=0)
        i, j = np.meshgrid(np.arange(h2), np.arange(w2), indexing="ij")
        mean = m_blocks[pick, i, j]
        var = v_blocks[pick, i, j]
        empty = ~np.isfinite(v_filled).any(axis=0)
        mean[empty] = np.nan
        var[empty] = np.nan
        return InverseDepthMap(mean, var)

    def save(self, path) -> None:
        """Binary dump: magic, uint32 width/height, float64 mean then variance."""
        h, w = self.mean.shape
        with open(path, "wb") as f:
            f.write(DEPTH_MAGIC)
            f.write(struct.pack("<II", w, h))
            f.write(self.mean.astype("<f8").tobytes())
            f.write(self.variance.astype("<f8").tobytes())

    @staticmethod
    def load(path) -> "InverseDepthMap":
        with open(path, "rb") as f:
            magic = f.read(len(DEPTH_MAGIC))
            if magic != DEPTH_MAGIC:
                raise ValueError(f"not an inverse-depth file: {path}")
            w, h = struct.unpack("<II", f.read(8))
            n = w * h * 8
            mean = np.frombuffer(f.read(n), dtype="<f8").reshape(h, w).copy()
            var = np.frombuffer(f.read(n), dtype="<f8").reshape(h, w).copy()
        return InverseDepthMap(mean, var)


def write_pgm(path, image: np.ndarray, scale: float = 256.0) -> None:
    """16-bit binary PGM; intensities are stored as round(I * scale)."""
    image = np.asarray(image, dtype=float)
    h, w = image.shape
    data = np.clip(np.round(image * scale), 0, 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path, scale: float = 256.0) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"not a binary PGM: {path}")
    w, h = (int(tok) for tok in parts[1].split())
    maxval = int(parts[2])
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(parts[3], dtype=dtype, count=w * h).reshape(h, w)
    return data.astype(float) / scale
