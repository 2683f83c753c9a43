"""Differentiable geometry core: warping, intermediate flows, blending.

All operations are pure torch functions over immutable inputs, so they are
reentrant and safe to call concurrently.  Convention used throughout the
package:

* a flow tensor has shape ``(..., 2, H, W)`` with channel 0 the x
  (column) displacement and channel 1 the y (row) displacement, in pixels;
* ``backward_warp(image, flow)[p] = image(p + flow(p))`` sampled with
  bilinear interpolation, out-of-grid coordinates clamped to the border.

Functions accept numpy arrays as a convenience and then return numpy; any
torch input keeps autograd intact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError, ValidationError

VISIBILITY_EPS = 1e-6
# Z cannot actually reach this once visibilities are clamped; defensive only.
_Z_FLOOR = 1e-8


def as_blend_time(t) -> float:
    """Validate and return a blend time as a plain float in [0, 1]."""
    if isinstance(t, BlendTime):
        return t.t
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"blend time must lie in [0, 1], got {t}")
    return t


@dataclass(frozen=True)
class BlendTime:
    """Time of the interpolated frame, as a fraction of the input gap."""

    t: float

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ContractError(f"blend time must lie in [0, 1], got {self.t}")


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement field (pixels); u is x/column, v is y/row."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float32)
        v = np.asarray(self.v, dtype=np.float32)
        if u.ndim != 2 or u.shape != v.shape:
            raise ContractError(f"flow components must be equal 2-D grids, got {u.shape} / {v.shape}")
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise ValidationError("flow field contains non-finite values")
        object.__setattr__(self, "u", _freeze(u))
        object.__setattr__(self, "v", _freeze(v))

    @property
    def shape(self):
        return self.u.shape

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        """Stack components into a ``(2, H, W)`` tensor (copies; fields are frozen)."""
        return torch.stack(
            [torch.tensor(np.array(self.u), dtype=dtype), torch.tensor(np.array(self.v), dtype=dtype)]
        )

    @classmethod
    def from_tensor(cls, flow: torch.Tensor) -> "FlowField":
        if flow.ndim != 3 or flow.shape[0] != 2:
            raise ContractError(f"expected a (2, H, W) flow tensor, got {tuple(flow.shape)}")
        arr = flow.detach().cpu().numpy()
        return cls(u=arr[0], v=arr[1])

    @classmethod
    def zeros(cls, h: int, w: int) -> "FlowField":
        return cls(u=np.zeros((h, w), np.float32), v=np.zeros((h, w), np.float32))


@dataclass(frozen=True)
class VisibilityMap:
    """Per-pixel source weight in (0, 1); clamped to [eps, 1-eps] on construction."""

    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float32)
        if w.ndim != 2:
            raise ContractError(f"visibility map must be a 2-D grid, got shape {w.shape}")
        if not np.isfinite(w).all():
            raise ValidationError("visibility map contains non-finite values")
        w = np.clip(w, VISIBILITY_EPS, 1.0 - VISIBILITY_EPS)
        object.__setattr__(self, "w", _freeze(w))

    @property
    def shape(self):
        return self.w.shape

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(np.array(self.w), dtype=dtype)


def _to_tensor(x, name: str):
    """Return (tensor, was_numpy); numpy inputs are promoted to float tensors."""
    if isinstance(x, FlowField):
        return x.tensor(), True
    if isinstance(x, VisibilityMap):
        return x.tensor(), True
    if isinstance(x, torch.Tensor):
        return x, False
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    if not arr.flags.writeable:
        arr = arr.copy()
    return torch.as_tensor(arr), True


def _expand_image(image: torch.Tensor):
    """Canonicalize an image to (N, C, H, W); return tensor and restore fn."""
    if image.ndim == 2:
        return image[None, None], lambda t: t[0, 0]
    if image.ndim == 3:
        return image[None], lambda t: t[0]
    if image.ndim == 4:
        return image, lambda t: t
    raise ContractError(f"image must have 2-4 dims, got {image.ndim}")


def _expand_flow(flow: torch.Tensor, batch: int):
    if flow.ndim == 3:
        flow = flow[None]
    if flow.ndim != 4 or flow.shape[1] != 2:
        raise ContractError(f"flow must be (..., 2, H, W), got {tuple(flow.shape)}")
    if flow.shape[0] == 1 and batch > 1:
        flow = flow.expand(batch, -1, -1, -1)
    return flow


def backward_warp(image, flow):
    """Sample ``image`` at ``p + flow(p)`` with bilinear interpolation.

    Out-of-grid sample coordinates clamp to the border, so constant images
    are absorbed exactly.  Differentiable w.r.t. both arguments.
    """
    img_t, img_np = _to_tensor(image, "image")
    flow_t, flow_np = _to_tensor(flow, "flow")
    img4, restore = _expand_image(img_t)
    flow4 = _expand_flow(flow_t, img4.shape[0])

    n, c, h, w = img4.shape
    if flow4.shape[0] != n or flow4.shape[2:] != (h, w):
        raise ContractError(
            f"flow shape {tuple(flow_t.shape)} does not match image shape {tuple(img_t.shape)}"
        )
    if not torch.isfinite(flow4).all():
        raise ValidationError("flow field contains non-finite values")

    dtype = torch.promote_types(img4.dtype, flow4.dtype)
    img4 = img4.to(dtype)
    flow4 = flow4.to(dtype)

    xs = torch.arange(w, dtype=dtype).view(1, 1, 1, w)
    ys = torch.arange(h, dtype=dtype).view(1, 1, h, 1)
    x = (xs + flow4[:, 0:1]).clamp(0, w - 1)
    y = (ys + flow4[:, 1:2]).clamp(0, h - 1)

    x0 = x.floor()
    y0 = y.floor()
    wx = x - x0
    wy = y - y0
    x0l = x0.long()
    y0l = y0.long()
    x1l = (x0l + 1).clamp(max=w - 1)
    y1l = (y0l + 1).clamp(max=h - 1)

    flat = img4.reshape(n, c, h * w)

    def sample(yi, xi):
        idx = (yi * w + xi).reshape(n, 1, h * w).expand(n, c, h * w)
        return flat.gather(2, idx).reshape(n, c, h, w)

    top = (1 - wx) * sample(y0l, x0l) + wx * sample(y0l, x1l)
    bot = (1 - wx) * sample(y1l, x0l) + wx * sample(y1l, x1l)
    out = restore((1 - wy) * top + wy * bot)

    if img_np and flow_np:
        return out.numpy()
    return out


def approx_intermediate_flows(f01, f10, t):
    """Time-weighted initial estimates of the flows from time t to each endpoint.

    Returns ``(fhat_t0, fhat_t1)``:

        fhat_t0 = -(1-t) * t * f01 + t^2     * f10
        fhat_t1 = (1-t)^2    * f01 - t*(1-t) * f10
    """
    f01_t, np01 = _to_tensor(f01, "f01")
    f10_t, np10 = _to_tensor(f10, "f10")
    if f01_t.shape != f10_t.shape:
        raise ContractError(f"flow shapes differ: {tuple(f01_t.shape)} vs {tuple(f10_t.shape)}")
    if isinstance(t, torch.Tensor):
        tt = t
    else:
        tt = as_blend_time(t)
    fhat_t0 = -(1 - tt) * tt * f01_t + tt * tt * f10_t
    fhat_t1 = (1 - tt) * (1 - tt) * f01_t - tt * (1 - tt) * f10_t
    if np01 and np10 and not isinstance(t, torch.Tensor):
        return fhat_t0.numpy(), fhat_t1.numpy()
    return fhat_t0, fhat_t1


def blend_visibility(warped0, warped1, v0, v1, t):
    """Visibility-weighted blend of the two warped endpoint images.

    ``out = [(1-t) * v0 * warped0 + t * v1 * warped1] / Z`` with
    ``Z = (1-t) * v0 + t * v1``.  The endpoints t=0 and t=1 short-circuit to
    the corresponding warped image so they are bit-exact.
    """
    w0_t, np_w0 = _to_tensor(warped0, "warped0")
    w1_t, np_w1 = _to_tensor(warped1, "warped1")
    v0_t, _ = _to_tensor(v0, "v0")
    v1_t, _ = _to_tensor(v1, "v1")
    if w0_t.shape != w1_t.shape:
        raise ContractError(f"warped shapes differ: {tuple(w0_t.shape)} vs {tuple(w1_t.shape)}")
    for name, vt in (("v0", v0_t), ("v1", v1_t)):
        if vt.shape[-2:] != w0_t.shape[-2:]:
            raise ContractError(f"{name} shape {tuple(vt.shape)} does not match images {tuple(w0_t.shape)}")

    scalar_t = not isinstance(t, torch.Tensor)
    if scalar_t:
        tt = as_blend_time(t)
        if tt == 0.0:
            return np.asarray(warped0).copy() if np_w0 else w0_t.clone()
        if tt == 1.0:
            return np.asarray(warped1).copy() if np_w1 else w1_t.clone()
    else:
        tt = t

    z = (1 - tt) * v0_t + tt * v1_t
    out = ((1 - tt) * v0_t * w0_t + tt * v1_t * w1_t) / z.clamp_min(_Z_FLOOR)
    if np_w0 and np_w1 and scalar_t:
        return out.numpy()
    return out


def linear_interpolate(i0, i1, t):
    """Convex combination ``(1-t) * i0 + t * i1``; endpoints are bit-exact."""
    i0_t, np0 = _to_tensor(i0, "i0")
    i1_t, np1 = _to_tensor(i1, "i1")
    if i0_t.shape != i1_t.shape:
        raise ContractError(f"image shapes differ: {tuple(i0_t.shape)} vs {tuple(i1_t.shape)}")
    tt = as_blend_time(t)
    if tt == 0.0:
        return np.asarray(i0).copy() if np0 else i0_t.clone()
    if tt == 1.0:
        return np.asarray(i1).copy() if np1 else i1_t.clone()
    out = (1 - tt) * i0_t + tt * i1_t
    if np0 and np1:
        return out.numpy()
    return out
