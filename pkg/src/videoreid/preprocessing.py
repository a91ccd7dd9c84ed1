"""Raw frame preparation.

Turns 8-bit RGB frames into the 5-channel 56x40 network input: bilinear
resize, YUV conversion, per-video channel normalization, and Lucas-Kanade
optical flow between consecutive frames. Frames are plain uint8 (H, W, 3)
arrays; the output of :func:`build_video_tensor` is a list of Tensors of
shape (5, 56, 40) with channels (Y, U, V, flow_x, flow_y).
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

TARGET_HW = (56, 40)
FLOW_CLAMP = 8.0           # pixels; flow channels are clamped then divided by this
LK_WINDOW = 5
LK_EIGEN_FLOOR = 1e-6      # smallest structure-tensor eigenvalue considered solvable
SIGMA_FLOOR = 1e-8         # below this std a channel is only mean-centered


def resize_bilinear(frame: np.ndarray, target_hw: tuple[int, int] = TARGET_HW) -> np.ndarray:
    """Bilinear resize with half-pixel-center alignment, back to uint8."""
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) RGB frame, got {frame.shape}")
    src_h, src_w = frame.shape[:2]
    if src_h < 2 or src_w < 2:
        raise ValueError(f"source too small to resize: {frame.shape}")
    dst_h, dst_w = target_hw
    src = frame.astype(np.float64)
    ys = np.clip((np.arange(dst_h) + 0.5) * (src_h / dst_h) - 0.5, 0, src_h - 1)
    xs = np.clip((np.arange(dst_w) + 0.5) * (src_w / dst_w) - 0.5, 0, src_w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bottom = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    blended = top * (1 - wy) + bottom * wy
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)


def rgb_to_yuv(frame: np.ndarray) -> np.ndarray:
    """BT.601 full-range YUV on [0, 1]-scaled RGB; returns (3, H, W) float."""
    rgb = frame.astype(np.float64) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    u = 0.492 * (b - y)
    v = 0.877 * (r - y)
    return np.stack([y, u, v])


def normalize_video_channels(frames: list[np.ndarray]) -> list[np.ndarray]:
    """Zero-mean unit-variance per channel, statistics over all frames.

    Channels with std below SIGMA_FLOOR are only mean-centered.
    """
    if not frames:
        raise ValueError("no frames to normalize")
    stacked = np.stack(frames)  # (N, 3, H, W)
    out = np.empty_like(stacked)
    for c in range(stacked.shape[1]):
        vals = stacked[:, c]
        mean = vals.mean()
        std = vals.std()
        if std < SIGMA_FLOOR:
            out[:, c] = vals - mean
        else:
            out[:, c] = (vals - mean) / std
    return [out[i] for i in range(out.shape[0])]


def _box_sum(a: np.ndarray, window: int) -> np.ndarray:
    """Sum of ``a`` over a window x window neighborhood, clipped at borders."""
    half = window // 2
    h, w = a.shape
    integral = np.zeros((h + 1, w + 1))
    integral[1:, 1:] = a.cumsum(axis=0).cumsum(axis=1)
    r0 = np.clip(np.arange(h) - half, 0, h)
    r1 = np.clip(np.arange(h) + half + 1, 0, h)
    c0 = np.clip(np.arange(w) - half, 0, w)
    c1 = np.clip(np.arange(w) + half + 1, 0, w)
    return (integral[np.ix_(r1, c1)] - integral[np.ix_(r0, c1)]
            - integral[np.ix_(r1, c0)] + integral[np.ix_(r0, c0)])


def lucas_kanade(prev: np.ndarray, nxt: np.ndarray,
                 window: int = LK_WINDOW) -> tuple[np.ndarray, np.ndarray]:
    """Dense Lucas-Kanade flow from ``prev`` to ``nxt`` (single channel).

    Solves the 2x2 normal equations over a local window with central-difference
    spatial gradients and a forward temporal difference. Pixels whose structure
    tensor has smallest eigenvalue below LK_EIGEN_FLOOR get zero flow.
    Returns (gx, gy) displacement fields in pixels.
    """
    if prev.shape != nxt.shape:
        raise ValueError(f"frame shapes differ: {prev.shape} vs {nxt.shape}")
    if window % 2 == 0:
        raise ValueError("window must be odd")
    ix = np.gradient(prev, axis=1)
    iy = np.gradient(prev, axis=0)
    it = nxt - prev
    sxx = _box_sum(ix * ix, window)
    sxy = _box_sum(ix * iy, window)
    syy = _box_sum(iy * iy, window)
    sxt = _box_sum(ix * it, window)
    syt = _box_sum(iy * it, window)
    trace = sxx + syy
    det = sxx * syy - sxy * sxy
    disc = np.sqrt(np.maximum(trace * trace - 4.0 * det, 0.0))
    lam_min = 0.5 * (trace - disc)
    solvable = lam_min >= LK_EIGEN_FLOOR
    safe_det = np.where(solvable, det, 1.0)
    gx = np.where(solvable, (sxy * syt - syy * sxt) / safe_det, 0.0)
    gy = np.where(solvable, (sxy * sxt - sxx * syt) / safe_det, 0.0)
    return gx, gy


def build_video_tensor(frames: list[np.ndarray]) -> list[Tensor]:
    """Full preprocessing of one video: resize, YUV, normalize, flow, stack.

    Flow for frame i is computed between frames i and i+1; the last frame
    reuses the preceding flow so the tensor count matches the frame count.
    Flow channels are clamped to +/-FLOW_CLAMP px and scaled into [-1, 1].
    """
    if len(frames) < 2:
        raise ValueError(f"need at least 2 frames, got {len(frames)}")
    yuv = [rgb_to_yuv(resize_bilinear(f)) for f in frames]
    yuv = normalize_video_channels(yuv)
    flows = [lucas_kanade(yuv[i][0], yuv[i + 1][0]) for i in range(len(yuv) - 1)]
    flows.append(flows[-1])
    tensors = []
    for img, (gx, gy) in zip(yuv, flows):
        fx = np.clip(gx, -FLOW_CLAMP, FLOW_CLAMP) / FLOW_CLAMP
        fy = np.clip(gy, -FLOW_CLAMP, FLOW_CLAMP) / FLOW_CLAMP
        tensors.append(Tensor(np.concatenate([img, fx[None], fy[None]], axis=0)))
    return tensors
