"""Dense variational optical flow and its 3-channel motion encoding.

A coarse-to-fine pyramid minimizes an energy with a brightness-constancy
term, a gradient-constancy term, and a robust smoothness term
psi(|grad u|^2 + |grad v|^2) with psi(s^2) = sqrt(s^2 + eps^2).  At each
level the second frame is warped by the current flow and the Euler-Lagrange
equations for the increments are solved by lagged-nonlinearity fixed-point
iterations with Jacobi sweeps.

Velocity fields are encoded as three [0, 1] channels (normalized dx,
normalized dy, normalized magnitude) quantized to 255 levels, which is also
the on-disk cache representation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

FLOW_MAGIC = b"SFLW"
FLOW_VERSION = 1


@dataclass
class FlowParams:
    pyramid_levels: int = 4
    pyramid_scale: float = 0.5
    warp_iterations: int = 5
    fixed_point_iterations: int = 10
    relax_sweeps: int = 5
    sor_omega: float = 1.85
    smoothness: float = 0.015       # alpha
    gradient_weight: float = 0.75   # gamma
    epsilon: float = 1e-3           # robust penalizer knee
    presmooth_sigma: float = 0.8
    min_level_size: int = 12
    use_descriptor_matching: bool = False
    target_size: tuple = (227, 227)


@dataclass
class FlowResult:
    uv: np.ndarray          # (H, W, 2) velocities in pixels/frame
    degenerate: bool = False


@dataclass
class FlowSequence:
    """(T-1) encoded motion frames for a T-frame video."""
    encoded: np.ndarray     # (n, H, W, 3) in [0, 1]
    m_max: float
    padded: int = 0         # fields appended by temporal resampling
    degenerate_pairs: int = 0

    def __len__(self):
        return self.encoded.shape[0]

    def decode(self):
        return np.stack([decode_flow(f, self.m_max) for f in self.encoded])


def _gray(frame):
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        return frame
    if frame.ndim == 3 and frame.shape[2] == 1:
        return frame[:, :, 0]
    if frame.ndim == 3 and frame.shape[2] == 3:
        return frame @ np.array([0.299, 0.587, 0.114])
    raise ValueError(f"flow: expected (H, W), (H, W, 1) or (H, W, 3) frames, got {frame.shape}")


def resize_image(img, height, width):
    """Bilinear resize to an exact target size."""
    if img.shape[:2] == (height, width):
        return img.astype(np.float64, copy=True)
    ys = np.linspace(0.0, img.shape[0] - 1.0, height)
    xs = np.linspace(0.0, img.shape[1] - 1.0, width)
    grid = np.meshgrid(ys, xs, indexing="ij")
    if img.ndim == 2:
        return ndimage.map_coordinates(img, grid, order=1, mode="nearest")
    return np.stack([ndimage.map_coordinates(img[..., c], grid, order=1, mode="nearest")
                     for c in range(img.shape[2])], axis=-1)


def _warp(img, u, v):
    """Sample img at (y + v, x + u); returns the warp and an in-bounds mask."""
    h, w = img.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    ys, xs = yy + v, xx + u
    inside = (ys >= 0) & (ys <= h - 1) & (xs >= 0) & (xs <= w - 1)
    warped = ndimage.map_coordinates(img, [ys, xs], order=1, mode="nearest")
    return warped, inside


def _gradients(img):
    gy, gx = np.gradient(img)
    return gx, gy


def _neighbor_sum(arr, weights):
    """Sum of w_n * a_n over the 4-neighborhood with edge replication."""
    total = np.zeros_like(arr)
    for w, shifted in zip(weights, _shifted4(arr)):
        total += w * shifted
    return total


def _shifted4(a):
    up = np.concatenate([a[:1], a[:-1]], axis=0)
    down = np.concatenate([a[1:], a[-1:]], axis=0)
    left = np.concatenate([a[:, :1], a[:, :-1]], axis=1)
    right = np.concatenate([a[:, 1:], a[:, -1:]], axis=1)
    return up, down, left, right


def _face_weights(psi):
    """Per-face smoothness weights: average of psi' at the two pixels."""
    return [0.5 * (psi + s) for s in _shifted4(psi)]


def _coarse_shift_estimate(a, b):
    """Integer global displacement via FFT cross-correlation (descriptor hook)."""
    fa = np.fft.rfft2(a - a.mean())
    fb = np.fft.rfft2(b - b.mean())
    corr = np.fft.irfft2(fa.conj() * fb, s=a.shape)
    peak = np.unravel_index(np.argmax(corr), corr.shape)
    dy, dx = peak
    if dy > a.shape[0] // 2:
        dy -= a.shape[0]
    if dx > a.shape[1] // 2:
        dx -= a.shape[1]
    return float(dx), float(dy)


def _pyramid(img, params):
    """Recursive smooth-and-shrink pyramid, returned coarse to fine."""
    levels = [img]
    for _ in range(params.pyramid_levels - 1):
        prev = levels[-1]
        h = int(round(prev.shape[0] * params.pyramid_scale))
        w = int(round(prev.shape[1] * params.pyramid_scale))
        if min(h, w) < params.min_level_size:
            break
        levels.append(resize_image(ndimage.gaussian_filter(prev, params.presmooth_sigma), h, w))
    return levels[::-1]


def _sor_masks(shape):
    yy, xx = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    red = (yy + xx) % 2 == 0
    return red, ~red


def compute_flow(frame_a, frame_b, params=None):
    """Estimate the dense velocity field carrying frame_a onto frame_b."""
    params = params or FlowParams()
    a = _gray(frame_a)
    b = _gray(frame_b)
    if a.shape != b.shape:
        raise ValueError(f"flow: frame shapes {a.shape} and {b.shape} differ")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("flow: frames contain non-finite values")
    if a.min() < -1e-9 or a.max() > 1 + 1e-9 or b.min() < -1e-9 or b.max() > 1 + 1e-9:
        raise ValueError("flow: pixel values must lie in [0, 1]")
    if a.std() < 1e-12 and b.std() < 1e-12:
        return FlowResult(uv=np.zeros(a.shape + (2,)), degenerate=True)

    eps2 = params.epsilon ** 2
    gamma = params.gradient_weight
    alpha = params.smoothness
    omega = params.sor_omega

    pyr_a = _pyramid(a, params)
    pyr_b = _pyramid(b, params)
    u = v = None
    for i1, i2 in zip(pyr_a, pyr_b):
        h, w = i1.shape
        if u is None:
            u = np.zeros((h, w))
            v = np.zeros((h, w))
            if params.use_descriptor_matching:
                dx, dy = _coarse_shift_estimate(i1, i2)
                u += dx
                v += dy
        else:
            scale_y = h / u.shape[0]
            scale_x = w / u.shape[1]
            u = resize_image(u, h, w) * scale_x
            v = resize_image(v, h, w) * scale_y
        masks = _sor_masks((h, w))

        for _ in range(params.warp_iterations):
            i2w, inside = _warp(i2, u, v)
            i1x, i1y = _gradients(i1)
            i2x, i2y = _gradients(i2w)
            ix = 0.5 * (i1x + i2x)
            iy = 0.5 * (i1y + i2y)
            iz = i2w - i1
            ixx, ixy = _gradients(ix)
            iyx, iyy = _gradients(iy)
            ixy = 0.5 * (ixy + iyx)
            ixz = i2x - i1x
            iyz = i2y - i1y
            valid = inside.astype(np.float64)

            du = np.zeros_like(u)
            dv = np.zeros_like(v)
            for _ in range(params.fixed_point_iterations):
                r = iz + ix * du + iy * dv
                rx = ixz + ixx * du + ixy * dv
                ry = iyz + ixy * du + iyy * dv
                psi_d = valid / (2.0 * np.sqrt(r * r + eps2))
                psi_g = gamma * valid / (2.0 * np.sqrt(rx * rx + ry * ry + eps2))

                ut, vt = u + du, v + dv
                ux, uy = _gradients(ut)
                vx, vy = _gradients(vt)
                psi_s = 1.0 / (2.0 * np.sqrt(ux ** 2 + uy ** 2 + vx ** 2 + vy ** 2 + eps2))
                weights = _face_weights(psi_s)
                wsum = sum(weights)

                a11 = psi_d * ix * ix + psi_g * (ixx * ixx + ixy * ixy) + alpha * wsum
                a12 = psi_d * ix * iy + psi_g * (ixx * ixy + ixy * iyy)
                a22 = psi_d * iy * iy + psi_g * (ixy * ixy + iyy * iyy) + alpha * wsum
                b1_fixed = -psi_d * ix * iz - psi_g * (ixx * ixz + ixy * iyz)
                b2_fixed = -psi_d * iy * iz - psi_g * (ixy * ixz + iyy * iyz)
                det = a11 * a22 - a12 * a12
                det = np.where(np.abs(det) < 1e-12, 1e-12, det)

                # red-black successive over-relaxation on the coupled system
                for _ in range(params.relax_sweeps):
                    for mask in masks:
                        su = _neighbor_sum(u + du, weights) - wsum * u
                        sv = _neighbor_sum(v + dv, weights) - wsum * v
                        b1 = b1_fixed + alpha * su
                        b2 = b2_fixed + alpha * sv
                        du_new = (a22 * b1 - a12 * b2) / det
                        dv_new = (a11 * b2 - a12 * b1) / det
                        du = np.where(mask, (1 - omega) * du + omega * du_new, du)
                        dv = np.where(mask, (1 - omega) * dv + omega * dv_new, dv)
            u = u + du
            v = v + dv

    return FlowResult(uv=np.stack([u, v], axis=-1), degenerate=False)


def encode_flow(field, m_max):
    """Velocity field (H, W, 2) to three [0, 1] motion channels.

    Channels: dx and dy mapped from [-m_max, m_max], magnitude from
    [0, m_max]; everything clipped.  The on-disk cache quantizes these
    channels to 255 levels, so a cache round trip recovers velocities
    within 2 * m_max / 255.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 3 or field.shape[2] != 2:
        raise ValueError(f"encode_flow: expected (H, W, 2), got {field.shape}")
    if m_max <= 0:
        raise ValueError("encode_flow: m_max must be positive")
    dx, dy = field[..., 0], field[..., 1]
    mag = np.hypot(dx, dy)
    out = np.stack([(dx / m_max + 1.0) / 2.0,
                    (dy / m_max + 1.0) / 2.0,
                    mag / m_max], axis=-1)
    return np.clip(out, 0.0, 1.0)


def decode_flow(encoded, m_max):
    """Inverse of encode_flow for the dx/dy channels."""
    encoded = np.asarray(encoded, dtype=np.float64)
    dx = (2.0 * encoded[..., 0] - 1.0) * m_max
    dy = (2.0 * encoded[..., 1] - 1.0) * m_max
    return np.stack([dx, dy], axis=-1)


def video_to_flow(frames, params=None, m_max=8.0):
    """Frames (T, H, W[, C]) in [0, 1] to an encoded (T-1)-field FlowSequence.

    Frames are resized to params.target_size first, so velocities are in
    target-pixel units.
    """
    params = params or FlowParams()
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim not in (3, 4):
        raise ValueError(f"video_to_flow: expected (T, H, W[, C]), got {frames.shape}")
    if frames.shape[0] < 2:
        raise ValueError(f"video_to_flow: need at least 2 frames, got {frames.shape[0]}")
    if params.target_size is not None:
        th, tw = params.target_size
        frames = np.stack([resize_image(f, th, tw) for f in frames])
    encoded = []
    degenerate = 0
    for t in range(frames.shape[0] - 1):
        result = compute_flow(frames[t], frames[t + 1], params)
        degenerate += int(result.degenerate)
        encoded.append(encode_flow(result.uv, m_max))
    return FlowSequence(encoded=np.stack(encoded), m_max=m_max,
                        degenerate_pairs=degenerate)


# ---------------------------------------------------------------------------
# on-disk cache: header (magic, version, T-1, W, H, m_max) + u8 channel data
# ---------------------------------------------------------------------------

def save_flow_cache(path, seq):
    data = np.round(np.clip(seq.encoded, 0.0, 1.0) * 255.0).astype(np.uint8)
    n, h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<IIIId", FLOW_VERSION, n, w, h, float(seq.m_max)))
        fh.write(data.tobytes())


def load_flow_cache(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FLOW_MAGIC:
            raise ValueError(f"{path}: not a flow cache (magic {magic!r})")
        version, n, w, h, m_max = struct.unpack("<IIIId", fh.read(24))
        if version != FLOW_VERSION:
            raise ValueError(f"{path}: unsupported flow cache version {version}")
        raw = fh.read(n * h * w * 3)
    data = np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w, 3)
    return FlowSequence(encoded=data.astype(np.float64) / 255.0, m_max=m_max)
