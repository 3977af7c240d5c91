"""Dense deformation fields: sampling, composition, scaling-and-squaring.

Fields are tensors of shape (N, 2, H, W) holding pixel displacements, channel 0
is dx (columns) and channel 1 is dy (rows). The point (x, y) of the output grid
reads the input at (x + dx, y + dy). Samples outside the image clamp to the border.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

FIELD_MAGIC = b"DFLD"
_HEADER = struct.Struct("<4sIII")  # magic, H, W, version


def identity_grid(h: int, w: int, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    ys = torch.arange(h, dtype=like.dtype, device=like.device)
    xs = torch.arange(w, dtype=like.dtype, device=like.device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return gx, gy


def _gather(flat: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    # flat: (N, C, H*W), idx: (N, H*W) -> (N, C, H*W)
    return torch.gather(flat, 2, idx.unsqueeze(1).expand(-1, flat.shape[1], -1))


def sample(img: torch.Tensor, sx: torch.Tensor, sy: torch.Tensor, mode: str = "bilinear") -> torch.Tensor:
    """Read ``img`` (N, C, H, W) at pixel coordinates ``sx``, ``sy`` (N, H', W')."""
    n, c, h, w = img.shape
    sx = sx.clamp(0, w - 1)
    sy = sy.clamp(0, h - 1)
    flat = img.reshape(n, c, h * w)
    out_shape = (n, c) + tuple(sx.shape[1:])
    if mode == "nearest":
        ix = torch.round(sx).long()
        iy = torch.round(sy).long()
        return _gather(flat, (iy * w + ix).reshape(n, -1)).reshape(out_shape)
    if mode != "bilinear":
        raise ValueError(f"unknown interpolation mode {mode!r}")
    x0f = torch.floor(sx)
    y0f = torch.floor(sy)
    wx = (sx - x0f).reshape(n, 1, -1)
    wy = (sy - y0f).reshape(n, 1, -1)
    x0 = x0f.long()
    y0 = y0f.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    def at(yi, xi):
        return _gather(flat, (yi * w + xi).reshape(n, -1))

    top = at(y0, x0) * (1 - wx) + at(y0, x1) * wx
    bot = at(y1, x0) * (1 - wx) + at(y1, x1) * wx
    return (top * (1 - wy) + bot * wy).reshape(out_shape)


def _check_field(phi: torch.Tensor) -> None:
    if phi.ndim != 4 or phi.shape[1] != 2:
        raise ValueError(f"deformation field must have shape (N, 2, H, W), got {tuple(phi.shape)}")


def warp_image(img: torch.Tensor, phi: torch.Tensor, mode: str = "bilinear") -> torch.Tensor:
    """Resample ``img`` through ``phi``; integer label maps need ``mode='nearest'``."""
    _check_field(phi)
    if img.ndim != 4 or img.shape[0] != phi.shape[0] or img.shape[2:] != phi.shape[2:]:
        raise ValueError(f"image shape {tuple(img.shape)} does not match field shape {tuple(phi.shape)}")
    is_int = not torch.is_floating_point(img)
    src = img.to(phi.dtype) if is_int else img
    gx, gy = identity_grid(phi.shape[2], phi.shape[3], phi)
    out = sample(src, gx + phi[:, 0], gy + phi[:, 1], mode)
    return out.to(img.dtype) if is_int else out


def compose(phi_a: torch.Tensor, phi_b: torch.Tensor) -> torch.Tensor:
    """Field of applying ``phi_a`` then ``phi_b``.

    ``warp_image(warp_image(x, a), b) ~= warp_image(x, compose(a, b))``.
    """
    _check_field(phi_a)
    _check_field(phi_b)
    if phi_a.shape != phi_b.shape:
        raise ValueError("fields must have the same shape")
    return phi_b + warp_image(phi_a, phi_b)


def integrate_velocity(v: torch.Tensor, steps: int = 7) -> torch.Tensor:
    """exp(v) of a stationary velocity field by scaling and squaring."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    _check_field(v)
    phi = v / (2 ** steps)
    for _ in range(steps):
        phi = compose(phi, phi)
    return phi


def smoothness_penalty(phi: torch.Tensor) -> torch.Tensor:
    """Diffusion regularizer: mean squared forward difference along x plus along y."""
    _check_field(phi)
    dx = phi[:, :, :, 1:] - phi[:, :, :, :-1]
    dy = phi[:, :, 1:, :] - phi[:, :, :-1, :]
    zero = phi.new_zeros(())
    tx = (dx ** 2).mean() if dx.numel() else zero
    ty = (dy ** 2).mean() if dy.numel() else zero
    return tx + ty


def jacobian_determinant(phi: torch.Tensor) -> torch.Tensor:
    """det(I + grad(phi)) per pixel, central differences (one-sided at edges)."""
    _check_field(phi)
    ddx_dy, ddx_dx = torch.gradient(phi[:, 0], dim=(1, 2))
    ddy_dy, ddy_dx = torch.gradient(phi[:, 1], dim=(1, 2))
    return (1 + ddx_dx) * (1 + ddy_dy) - ddx_dy * ddy_dx


def jacobian_report(phi: torch.Tensor) -> dict[str, float]:
    det = jacobian_determinant(phi.detach())
    return {
        "min_det": float(det.min()),
        "frac_nonpositive": float((det <= 0).double().mean()),
    }


def save_field(path: str | Path, phi: torch.Tensor) -> None:
    """Raw little-endian float32 H x W x 2 after a 16-byte header."""
    if phi.ndim == 4:
        if phi.shape[0] != 1:
            raise ValueError("only single fields can be serialized")
        phi = phi[0]
    if phi.ndim != 3 or phi.shape[0] != 2:
        raise ValueError(f"expected a (2, H, W) field, got {tuple(phi.shape)}")
    _, h, w = phi.shape
    arr = phi.detach().cpu().numpy().transpose(1, 2, 0).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FIELD_MAGIC, h, w, 1))
        fh.write(arr.tobytes())


def load_field(path: str | Path) -> torch.Tensor:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated field file")
    magic, h, w, _ = _HEADER.unpack_from(data)
    if magic != FIELD_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    body = data[_HEADER.size:]
    if len(body) != h * w * 2 * 4:
        raise ValueError(f"{path}: expected {h * w * 2 * 4} payload bytes, got {len(body)}")
    arr = np.frombuffer(body, dtype="<f4").reshape(h, w, 2)
    return torch.from_numpy(arr.transpose(2, 0, 1).copy()).unsqueeze(0)
