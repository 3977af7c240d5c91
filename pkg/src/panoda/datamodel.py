"""Core data types, configuration and the on-disk dataset layout.

Layout::

    root/
      pin_src_<i>/images/<id>.png   pin_src_<i>/labels/<id>.png
      pan_src_<i>/images/<id>.png   pan_src_<i>/labels/<id>.png
      target/images/<id>.png

Label PNGs are single-channel 8-bit class indices, 255 marks ignored pixels.
"""
from __future__ import annotations

import dataclasses
import enum
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from PIL import Image

IGNORE = 255


class DatasetError(ValueError):
    """Raised when a dataset directory or an image violates the layout contract."""


class ConfigError(ValueError):
    pass


class Role(str, enum.Enum):
    PIN_SRC = "pin_src"
    PAN_SRC = "pan_src"
    TARGET = "target"


@dataclass(frozen=True)
class Domain:
    role: Role
    index: int = 0

    @property
    def dirname(self) -> str:
        if self.role is Role.TARGET:
            return "target"
        return f"{self.role.value}_{self.index}"

    @property
    def is_pinhole(self) -> bool:
        return self.role is Role.PIN_SRC


@dataclass
class LabeledImage:
    pixels: np.ndarray  # H x W x 3, float32 in [0, 1]
    labels: np.ndarray | None  # H x W, uint8
    domain: Domain
    id: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


def validate_image(img: LabeledImage, num_classes: int) -> LabeledImage:
    """Shared validator for the LabeledImage invariants."""
    px = img.pixels
    if px.ndim != 3 or px.shape[2] != 3:
        raise DatasetError(f"{img.id}: pixels must be HxWx3, got {px.shape}")
    h, w = px.shape[:2]
    if h < 16 or w < 16 or h % 2 or w % 2:
        raise DatasetError(f"{img.id}: H and W must be even and >= 16, got {h}x{w}")
    if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
        raise DatasetError(f"{img.id}: pixels must be finite and within [0, 1]")
    if img.labels is not None:
        lab = img.labels
        if lab.shape != (h, w):
            raise DatasetError(f"{img.id}: label shape {lab.shape} != image shape {(h, w)}")
        bad = (lab >= num_classes) & (lab != IGNORE)
        if bad.any():
            raise DatasetError(
                f"{img.id}: label value {int(lab[bad][0])} is not a class index < {num_classes} or IGNORE"
            )
    return img


@dataclass
class DomainSet:
    pin_domains: list[list[LabeledImage]]
    pan_domains: list[list[LabeledImage]]
    target: list[LabeledImage]
    num_classes: int

    @property
    def M(self) -> int:
        return len(self.pin_domains)

    @property
    def N(self) -> int:
        return len(self.pan_domains)

    def __len__(self) -> int:
        return sum(map(len, self.pin_domains)) + sum(map(len, self.pan_domains)) + len(self.target)

    def validate(self) -> DomainSet:
        if self.M < 1 or any(len(d) == 0 for d in self.pin_domains):
            raise DatasetError("pinhole source domain empty")
        if self.N < 1 or any(len(d) == 0 for d in self.pan_domains):
            raise DatasetError("panoramic source domain empty")
        if len(self.target) == 0:
            raise DatasetError("target domain empty")
        for dom in self.pin_domains + self.pan_domains:
            for img in dom:
                if img.labels is None:
                    raise DatasetError(f"{img.id}: source image without labels")
                validate_image(img, self.num_classes)
        for img in self.target:
            if img.labels is not None:
                raise DatasetError(f"{img.id}: target images must be unlabeled")
            validate_image(img, self.num_classes)
        return self


# ---------------------------------------------------------------------------
# image io

def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def read_label(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise DatasetError(f"{path}: label PNG must be single-channel, got mode {im.mode}")
        return np.asarray(im, dtype=np.uint8).copy()


def write_rgb(path: Path, pixels: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(pixels), mode="RGB").save(path)


def write_label(path: Path, labels: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


_DOMAIN_DIR = re.compile(r"^(pin_src|pan_src)_(\d+)$")


def _load_domain(d: Path, domain: Domain, num_classes: int, labeled: bool) -> list[LabeledImage]:
    img_dir = d / "images"
    if not img_dir.is_dir():
        return []
    out = []
    for p in sorted(img_dir.glob("*.png")):
        labels = None
        if labeled:
            lp = d / "labels" / p.name
            if not lp.is_file():
                raise DatasetError(f"missing label file {lp}")
            labels = read_label(lp)
        img = LabeledImage(read_rgb(p), labels, domain, f"{domain.dirname}/{p.stem}")
        out.append(validate_image(img, num_classes))
    return out


def load_dataset(root: str | Path, num_classes: int = 5) -> DomainSet:
    """Read a dataset directory. Only pin_src_*, pan_src_* and target/ are touched."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    pins: dict[int, list[LabeledImage]] = {}
    pans: dict[int, list[LabeledImage]] = {}
    for d in sorted(root.iterdir()):
        m = _DOMAIN_DIR.match(d.name)
        if not m or not d.is_dir():
            continue
        role = Role(m.group(1))
        idx = int(m.group(2))
        imgs = _load_domain(d, Domain(role, idx), num_classes, labeled=True)
        (pins if role is Role.PIN_SRC else pans)[idx] = imgs
    target = []
    if (root / "target").is_dir():
        target = _load_domain(root / "target", Domain(Role.TARGET), num_classes, labeled=False)
    ds = DomainSet(
        pin_domains=[pins[k] for k in sorted(pins)],
        pan_domains=[pans[k] for k in sorted(pans)],
        target=target,
        num_classes=num_classes,
    )
    return ds.validate()


def save_dataset(ds: DomainSet, root: str | Path) -> None:
    root = Path(root)
    for dom in ds.pin_domains + ds.pan_domains + [ds.target]:
        for img in dom:
            name = img.id.split("/")[-1] + ".png"
            d = root / img.domain.dirname
            write_rgb(d / "images" / name, img.pixels)
            if img.labels is not None:
                write_label(d / "labels" / name, img.labels)


# ---------------------------------------------------------------------------
# configuration

PROFILES: dict[str, dict[str, Any]] = {
    # the published optimizer settings; they assume tens of thousands of full-size iterations
    "published": dict(lr_F=2.5e-6, lr_D=2.5e-6, lr_S=5e-6, wd_F=5e-5, wd_D=5e-5, wd_S=5e-4),
    "desk": dict(lr_F=1e-4, lr_D=1e-4, lr_S=1e-3, wd_F=5e-5, wd_D=5e-5, wd_S=5e-4),
}


@dataclass
class TrainConfig:
    profile: str = "desk"
    alpha: float = 20.0
    beta: float = 0.5
    gamma: float = 0.999
    eta: float = 0.95
    max_its: int = 500
    lr_F: float = 1e-4
    lr_D: float = 1e-4
    lr_S: float = 1e-3
    wd_F: float = 5e-5
    wd_D: float = 5e-5
    wd_S: float = 5e-4
    momentum_S: float = 0.9
    seed: int = 0
    num_classes: int = 5
    height: int = 64
    width: int = 128
    pretrain_height: int = 64
    pretrain_width: int = 128
    pretrain_iters: int = 1000
    pretrain_batch: int = 2
    lr_pretrain: float = 1e-2
    integration_steps: int = 7
    max_velocity: float = 4.0
    use_usm: bool = True
    gating: str = "conv"
    # augmentation
    p_flip: float = 0.5
    p_jitter: float = 0.8
    jitter_strength: float = 0.2
    p_blur: float = 0.5
    blur_sigma: float = 1.0
    p_erase: float = 0.5
    erase_frac: float = 0.15
    p_lab: float = 0.8
    pretrain_augment: bool = True
    # bookkeeping
    checkpoint_every: int = 0  # 0 -> max_its // 10
    skip_nonfinite: bool = True

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(name: str, value: Any) -> Any:
    typ = _FIELDS[name].type
    if typ == "bool":
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{name}: cannot parse boolean from {value!r}")
        return bool(value)
    try:
        if typ == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if typ == "float":
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected {typ}, got {value!r}") from None
    return str(value)


def validate_config(cfg: TrainConfig | Mapping[str, Any] | None = None) -> TrainConfig:
    """Fill defaults, coerce types and check ranges.

    Profile values (learning rates and weight decays) are applied first and can be
    overridden by explicit keys.
    """
    if cfg is None:
        cfg = {}
    if isinstance(cfg, TrainConfig):
        raw = cfg.to_dict()
    else:
        raw = dict(cfg)
        unknown = sorted(set(raw) - set(_FIELDS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        profile = str(raw.get("profile", "desk"))
        if profile not in PROFILES:
            raise ConfigError(f"profile must be one of {sorted(PROFILES)}, got {profile!r}")
        raw = {**PROFILES[profile], **raw}
    out = TrainConfig(**{k: _coerce(k, v) for k, v in raw.items()})

    if out.profile not in PROFILES:
        raise ConfigError(f"profile must be one of {sorted(PROFILES)}")
    if not out.alpha > 0:
        raise ConfigError(f"alpha must be > 0, got {out.alpha}")
    if not out.beta > 0:
        raise ConfigError(f"beta must be > 0, got {out.beta}")
    if not 0.0 <= out.gamma <= 1.0:
        raise ConfigError(f"gamma must lie in [0, 1], got {out.gamma}")
    if not 0.0 < out.eta < 1.0:
        raise ConfigError(f"eta must lie in (0, 1), got {out.eta}")
    if out.max_its < 1:
        raise ConfigError(f"max_its must be >= 1, got {out.max_its}")
    if out.num_classes < 2 or out.num_classes >= IGNORE:
        raise ConfigError(f"num_classes must lie in [2, {IGNORE}), got {out.num_classes}")
    for name in ("height", "width", "pretrain_height", "pretrain_width"):
        v = getattr(out, name)
        if v < 16 or v % 4:
            raise ConfigError(f"{name} must be >= 16 and divisible by 4, got {v}")
    if out.integration_steps < 1:
        raise ConfigError("integration_steps must be >= 1")
    if out.pretrain_iters < 0 or out.pretrain_batch < 1:
        raise ConfigError("pretrain_iters must be >= 0 and pretrain_batch >= 1")
    for name in ("p_flip", "p_jitter", "p_blur", "p_erase", "p_lab"):
        if not 0.0 <= getattr(out, name) <= 1.0:
            raise ConfigError(f"{name} must be a probability")
    for name in ("lr_F", "lr_D", "lr_S", "lr_pretrain", "wd_F", "wd_D", "wd_S"):
        if getattr(out, name) < 0:
            raise ConfigError(f"{name} must be >= 0")
    if out.gating != "conv":
        raise ConfigError(f"gating variant {out.gating!r} not available (only 'conv')")
    return out


def parse_config_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, value = line.split("=", 1)
        elif ":" in line:
            key, value = line.split(":", 1)
        else:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        out[key] = value.strip()
    return out


def load_config(path: str | Path | None, **overrides: Any) -> TrainConfig:
    raw: dict[str, Any] = {}
    if path is not None:
        raw.update(parse_config_text(Path(path).read_text()))
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return validate_config(raw)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
