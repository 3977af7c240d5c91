"""Procedural benchmark: pinhole source, panoramic source and a panoramic target.

Scenes live in continuous coordinates (u, v) in [-1, 1]^2 (u across columns, v down
rows). A pinhole image samples the scene on the regular pixel grid; a panoramic
image samples it at ``AnalyticWarp.forward`` of the grid, so the exact pixel
displacement between the two geometries is known in closed form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .datamodel import Domain, DomainSet, LabeledImage, Role, save_dataset, validate_image, write_label

Coords = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]

# largest strength for which the column-varying sine stretch stays monotone
MAX_STRENGTH = math.pi / 3


@dataclass(frozen=True)
class AnalyticWarp:
    """A closed-form coordinate map and its inverse on normalized coordinates."""

    forward: Coords
    inverse: Coords
    name: str = "warp"


def identity_warp() -> AnalyticWarp:
    ident = lambda u, v: (np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64))
    return AnalyticWarp(ident, ident, "identity")


def translation_warp(dx_px: float, dy_px: float, h: int, w: int) -> AnalyticWarp:
    du = 2.0 * dx_px / (w - 1)
    dv = 2.0 * dy_px / (h - 1)
    return AnalyticWarp(
        lambda u, v: (np.asarray(u) + du, np.asarray(v) + dv),
        lambda u, v: (np.asarray(u) - du, np.asarray(v) - dv),
        f"translate({dx_px},{dy_px})",
    )


def _stretch_rate(u: np.ndarray, k: float) -> np.ndarray:
    return k * (1.0 + 0.5 * np.sin(np.pi * np.asarray(u, dtype=np.float64)))


def _sinc_ratio(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    # sin(a v) / sin(a), continuous at a = 0
    a = np.asarray(a, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    small = np.abs(a) < 1e-8
    safe = np.where(small, 1.0, a)
    return np.where(small, v, np.sin(safe * v) / np.sin(safe))


def _arcsin_ratio(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    small = np.abs(a) < 1e-8
    safe = np.where(small, 1.0, a)
    return np.where(small, v, np.arcsin(np.clip(v * np.sin(safe), -1.0, 1.0)) / safe)


def equirect_warp(k: float) -> AnalyticWarp:
    """Vertical stretch emulating an equirectangular projection.

    Row coordinate v maps to sin(a v) / sin(a) with a = k (1 + 0.5 sin(pi u)):
    content near the top and bottom rows is magnified, the amount varies
    sinusoidally across columns, columns never move and the border rows stay put.
    """
    if k < 0:
        raise ValueError(f"distortion strength must be >= 0, got {k}")
    if k >= MAX_STRENGTH:
        raise ValueError(f"distortion strength must be < {MAX_STRENGTH:.4f} to stay diffeomorphic")

    def fwd(u, v):
        u = np.asarray(u, dtype=np.float64)
        return u, _sinc_ratio(_stretch_rate(u, k), v)

    def inv(u, v):
        u = np.asarray(u, dtype=np.float64)
        return u, _arcsin_ratio(_stretch_rate(u, k), v)

    return AnalyticWarp(fwd, inv, f"equirect({k})")


def pixel_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return xs, ys


def to_normalized(x, y, h, w):
    return 2.0 * np.asarray(x) / (w - 1) - 1.0, 2.0 * np.asarray(y) / (h - 1) - 1.0


def to_pixels(u, v, h, w):
    return (np.asarray(u) + 1.0) * (w - 1) / 2.0, (np.asarray(v) + 1.0) * (h - 1) / 2.0


def analytic_field(warp: AnalyticWarp, h: int, w: int, inverse: bool = False,
                   dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Pixel displacement field (1, 2, H, W) of ``warp.forward`` (or ``inverse``)."""
    if h < 16 or w < 16:
        raise ValueError("H and W must be >= 16")
    xs, ys = pixel_grid(h, w)
    fn = warp.inverse if inverse else warp.forward
    u, v = to_normalized(xs, ys, h, w)
    u2, v2 = fn(u, v)
    # differences in normalized units first, so coordinates a warp leaves alone give exactly 0
    field = np.stack([(u2 - u) * (w - 1) / 2.0, (v2 - v) * (h - 1) / 2.0])[None]
    return torch.from_numpy(field).to(dtype)


# ---------------------------------------------------------------------------
# scenes

_BASE_COLORS = np.array([
    [0.55, 0.70, 0.90],  # 0 sky
    [0.35, 0.35, 0.38],  # 1 ground
    [0.62, 0.45, 0.33],  # 2 block (rectangles)
    [0.90, 0.82, 0.20],  # 3 pole (thin bands)
    [0.22, 0.55, 0.25],  # 4 blob (ellipses)
])


def _class_colors(num_classes: int) -> np.ndarray:
    if num_classes <= len(_BASE_COLORS):
        return _BASE_COLORS[:num_classes].copy()
    extra = np.random.default_rng(12345).uniform(0.15, 0.9, size=(num_classes - len(_BASE_COLORS), 3))
    return np.concatenate([_BASE_COLORS, extra])


@dataclass
class Palette:
    """Per-class base colors plus noise amplitudes for one domain."""

    colors: np.ndarray  # C x 3
    smooth_noise: float = 0.04
    pixel_noise: float = 0.02

    @classmethod
    def pinhole(cls, num_classes: int = 5) -> Palette:
        return cls(_class_colors(num_classes))

    @classmethod
    def pan_source(cls, num_classes: int = 5) -> Palette:
        # synthetic renderer: slightly warmer and more saturated
        c = _class_colors(num_classes)
        c = np.clip(0.5 + 1.15 * (c - 0.5) + np.array([0.04, 0.0, -0.04]), 0.0, 1.0)
        return cls(c)

    @classmethod
    def target(cls, num_classes: int = 5) -> Palette:
        # real panoramic camera: hazy, low contrast, color cast
        c = _class_colors(num_classes)
        gray = c.mean(axis=1, keepdims=True)
        c = 0.5 * gray + 0.5 * c
        c = np.clip(0.45 * c + np.array([0.38, 0.30, 0.20]), 0.0, 1.0)
        return cls(c, smooth_noise=0.05, pixel_noise=0.02)


@dataclass
class SceneSpec:
    seed: int = 0
    num_classes: int = 5
    height: int = 64
    width: int = 128
    distortion_strength: float = 0.9
    palette_pin: Palette | None = None
    palette_pan_src: Palette | None = None
    palette_target: Palette | None = None
    n_blocks: tuple[int, int] = (2, 5)
    n_blobs: tuple[int, int] = (1, 4)
    n_poles: tuple[int, int] = (1, 4)
    pole_width_px: tuple[float, float] = (2.0, 4.0)
    texture_amplitude: float = 0.06

    def __post_init__(self):
        if self.palette_pin is None:
            self.palette_pin = Palette.pinhole(self.num_classes)
        if self.palette_pan_src is None:
            self.palette_pan_src = Palette.pan_source(self.num_classes)
        if self.palette_target is None:
            self.palette_target = Palette.target(self.num_classes)

    def warp(self) -> AnalyticWarp:
        return equirect_warp(self.distortion_strength)


@dataclass
class Scene:
    horizon: tuple[float, float, float]  # level, amplitude, phase
    shapes: list[tuple[str, int, tuple[float, ...]]] = field(default_factory=list)
    waves: np.ndarray = None  # J x 5: (wu, wv, phase, weight_r, weight_gb...)


def _shape_kinds(num_classes: int) -> dict[int, str]:
    kinds = {2: "rect", 3: "band", 4: "ellipse"}
    cycle = ["rect", "ellipse", "band"]
    for c in range(5, num_classes):
        kinds[c] = cycle[(c - 5) % 3]
    return {c: k for c, k in kinds.items() if c < num_classes}


def sample_scene(spec: SceneSpec, rng: np.random.Generator) -> Scene:
    scene = Scene(horizon=(rng.uniform(-0.2, 0.25), rng.uniform(0.0, 0.12), rng.uniform(0, 2 * np.pi)))
    kinds = _shape_kinds(spec.num_classes)
    counts = {"rect": spec.n_blocks, "ellipse": spec.n_blobs, "band": spec.n_poles}
    per_kind: dict[str, list[int]] = {}
    for c, k in kinds.items():
        per_kind.setdefault(k, []).append(c)
    order = []
    for kind in ("rect", "ellipse", "band"):
        for c in per_kind.get(kind, []):
            lo, hi = counts[kind]
            for _ in range(int(rng.integers(lo, hi + 1))):
                order.append((kind, c))
    for kind, c in order:
        if kind == "rect":
            cu = rng.uniform(-1, 1)
            hw = rng.uniform(0.08, 0.3)
            top = rng.uniform(-0.75, -0.1)
            bottom = rng.uniform(0.15, 0.6)
            scene.shapes.append((kind, c, (cu - hw, cu + hw, top, bottom)))
        elif kind == "ellipse":
            scene.shapes.append((kind, c, (rng.uniform(-1, 1), rng.uniform(-0.3, 0.6),
                                           rng.uniform(0.08, 0.22), rng.uniform(0.12, 0.35))))
        else:
            wpx = rng.uniform(*spec.pole_width_px)
            half = wpx / (spec.width - 1)  # half width in normalized units
            cu = rng.uniform(-0.95, 0.95)
            scene.shapes.append((kind, c, (cu - half, cu + half, rng.uniform(-0.9, -0.3), rng.uniform(0.3, 0.9))))
    j = 6
    scene.waves = np.column_stack([
        rng.normal(0, 3.0, j), rng.normal(0, 3.0, j), rng.uniform(0, 2 * np.pi, j), rng.normal(0, 1, (j, 3)),
    ])
    return scene


def _texture(c: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # class-specific stripe pattern, identical in every domain
    ang = 0.7 * c
    freq = 3.0 + 2.0 * (c % 3)
    return np.sin(2 * np.pi * freq * (np.cos(ang) * u + np.sin(ang) * v))


def render(scene: Scene, spec: SceneSpec, palette: Palette, u: np.ndarray, v: np.ndarray,
           rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the scene at scene coordinates ``u``, ``v``; returns (pixels, labels)."""
    level, amp, phase = scene.horizon
    labels = np.where(v < level + amp * np.sin(np.pi * u + phase), 0, 1).astype(np.uint8)
    for kind, c, p in scene.shapes:
        if kind == "ellipse":
            cu, cv, ru, rv = p
            mask = ((u - cu) / ru) ** 2 + ((v - cv) / rv) ** 2 <= 1.0
        else:
            u0, u1, v0, v1 = p
            mask = (u >= u0) & (u <= u1) & (v >= v0) & (v <= v1)
        labels[mask] = c

    pixels = palette.colors[labels].astype(np.float64)
    tex = np.zeros_like(u, dtype=np.float64)
    for c in np.unique(labels):
        m = labels == c
        tex[m] = _texture(int(c), u[m], v[m])
    pixels += spec.texture_amplitude * tex[..., None]
    waves = scene.waves
    smooth = np.zeros(u.shape + (3,))
    for wu, wv, ph, *wc in waves:
        smooth += np.sin(wu * u + wv * v + ph)[..., None] * np.asarray(wc)
    pixels += palette.smooth_noise * smooth / np.sqrt(len(waves))
    if rng is not None and palette.pixel_noise > 0:
        pixels += rng.normal(0.0, palette.pixel_noise, pixels.shape)
    # stored datasets are 8-bit; quantize so in-memory and on-disk data agree
    pixels = np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0
    return pixels.astype(np.float32), labels


_ROLE_CODE = {Role.PIN_SRC: 1, Role.PAN_SRC: 2, Role.TARGET: 3}


def render_image(spec: SceneSpec, role: Role, index: int, distort: bool | None = None,
                 palette: Palette | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic image ``index`` of a domain; depends only on (seed, role, index)."""
    rng = np.random.default_rng([spec.seed, _ROLE_CODE[role], index])
    scene = sample_scene(spec, rng)
    if palette is None:
        palette = {Role.PIN_SRC: spec.palette_pin, Role.PAN_SRC: spec.palette_pan_src,
                   Role.TARGET: spec.palette_target}[role]
    if distort is None:
        distort = role is not Role.PIN_SRC
    u, v = to_normalized(*pixel_grid(spec.height, spec.width), spec.height, spec.width)
    if distort:
        u, v = spec.warp().forward(u, v)
    return render(scene, spec, palette, u, v, rng)


@dataclass
class Benchmark:
    domains: DomainSet
    target_eval: list[np.ndarray]  # ground truth of domains.target, evaluation only
    spec: SceneSpec


def generate_benchmark(spec: SceneSpec, counts: tuple[int, int, int] = (50, 50, 50)) -> Benchmark:
    if spec.distortion_strength < 0:
        raise ValueError(f"distortion_strength must be >= 0, got {spec.distortion_strength}")
    if len(counts) != 3 or min(counts) < 1:
        raise ValueError(f"counts must be three integers >= 1, got {counts}")
    spec.warp()  # validates the strength range
    n_pin, n_pan, n_tgt = counts
    pin_dom, pan_dom, tgt_dom = Domain(Role.PIN_SRC, 0), Domain(Role.PAN_SRC, 0), Domain(Role.TARGET)
    pins, pans, tgts, eval_labels = [], [], [], []
    for i in range(n_pin):
        px, lab = render_image(spec, Role.PIN_SRC, i)
        pins.append(LabeledImage(px, lab, pin_dom, f"{pin_dom.dirname}/{i:05d}"))
    for i in range(n_pan):
        px, lab = render_image(spec, Role.PAN_SRC, i)
        pans.append(LabeledImage(px, lab, pan_dom, f"{pan_dom.dirname}/{i:05d}"))
    for i in range(n_tgt):
        px, lab = render_image(spec, Role.TARGET, i)
        tgts.append(LabeledImage(px, None, tgt_dom, f"target/{i:05d}"))
        eval_labels.append(lab)
    ds = DomainSet([pins], [pans], tgts, spec.num_classes)
    for img in pins + pans + tgts:
        validate_image(img, spec.num_classes)
    return Benchmark(ds.validate(), eval_labels, spec)


def write_benchmark(bench: Benchmark, root: str | Path) -> None:
    root = Path(root)
    save_dataset(bench.domains, root)
    for img, lab in zip(bench.domains.target, bench.target_eval):
        write_label(root / "target_eval" / "labels" / (img.id.split("/")[-1] + ".png"), lab)
