"""Source pre-training and the alternating adaptation loop.

One adaptation step runs, in order: pseudo-labels from the teacher, deformation
fields, warp + class-mix + augmentation, the segmentation update, the deformation
update, the discriminator update and finally the EMA teacher update.
"""
from __future__ import annotations

import copy
import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import IGNORE, DomainSet, LabeledImage, TrainConfig, dump_config, validate_config
from .dga import (AugmentParams, TeacherState, augment, class_mix, cross_entropy, ema_update,
                  lab_transfer, pseudo_labels, seg_loss_total, uncertainty_loss)
from .segnet import CHECKPOINT_VERSION, SegModel
from .usm import (DeformationNetwork, DvD, adversarial_losses, cycle_losses, discriminator_losses,
                  grayscale, morph_forward, morph_loss_total, smooth_loss)

log = logging.getLogger(__name__)

PAIRINGS = ("src_pan", "tgt_pan")
STEP_ORDER = ("pseudo", "deform", "mix", "S", "F", "D", "teacher")
LEDGER_FIELDS = (
    "iteration", "pairing", "skipped", "l_pin", "l_pan", "l_t", "l_seg", "d_kl", "coverage",
    "l_dis_img", "l_dis_pix", "l_adv_img", "l_adv_pix", "l_recon", "l_sem", "l_smooth", "l_morph",
)


class CheckpointError(RuntimeError):
    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state


class NonFiniteLoss(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# data

@dataclass
class DomainTensors:
    images: torch.Tensor  # (n, 3, H, W)
    labels: torch.Tensor | None  # (n, H, W) long


def _stack(imgs: list[LabeledImage], size: tuple[int, int]) -> DomainTensors:
    x = torch.from_numpy(np.stack([im.pixels for im in imgs])).permute(0, 3, 1, 2).float()
    y = None
    if imgs[0].labels is not None:
        y = torch.from_numpy(np.stack([im.labels for im in imgs]).astype(np.int64))
    if tuple(x.shape[2:]) != tuple(size):
        x = F.interpolate(x, size=size, mode="bilinear", align_corners=False).clamp(0, 1)
        if y is not None:
            y = F.interpolate(y[:, None].float(), size=size, mode="nearest")[:, 0].long()
    return DomainTensors(x, y)


@dataclass
class TrainData:
    pin: list[DomainTensors]
    pan: list[DomainTensors]
    target: DomainTensors

    @classmethod
    def from_domainset(cls, ds: DomainSet, size: tuple[int, int]) -> TrainData:
        ds.validate()
        return cls([_stack(d, size) for d in ds.pin_domains],
                   [_stack(d, size) for d in ds.pan_domains],
                   _stack(ds.target, size))


def _draw(domains: list[DomainTensors], rng: np.random.Generator, n: int = 1):
    xs, ys = [], []
    for _ in range(n):
        dom = domains[int(rng.integers(len(domains)))]
        k = int(rng.integers(dom.images.shape[0]))
        xs.append(dom.images[k])
        ys.append(None if dom.labels is None else dom.labels[k])
    y = None if ys[0] is None else torch.stack(ys)
    return torch.stack(xs), y


@dataclass
class Batch:
    u: torch.Tensor  # pinhole source image (1, 3, H, W)
    y_u: torch.Tensor
    v: torch.Tensor  # panoramic source image
    delta: torch.Tensor
    t: torch.Tensor  # target image, unlabeled


def draw_batch(data: TrainData, rng: np.random.Generator) -> Batch:
    u, y_u = _draw(data.pin, rng)
    v, delta = _draw(data.pan, rng)
    t, _ = _draw([data.target], rng)
    return Batch(u, y_u, v, delta, t)


# ---------------------------------------------------------------------------
# models

def build_student(cfg: TrainConfig) -> SegModel:
    torch.manual_seed(cfg.seed)
    return SegModel(cfg.num_classes)


def build_morph(cfg: TrainConfig):
    torch.manual_seed(cfg.seed + 1)
    f_net = DeformationNetwork(max_velocity=cfg.max_velocity, steps=cfg.integration_steps)
    discs = {name: DvD() for name in PAIRINGS}
    return f_net, discs


def _poly(base_lr, it, total, power=0.9):
    return base_lr * (1 - it / max(total, 1)) ** power


def source_pretrain(cfg: TrainConfig, data: DomainSet | TrainData,
                    callback: Callable[[int, dict], None] | None = None) -> tuple[SegModel, TeacherState]:
    """Supervised training on the sources only (no target images, no deformation).

    h_pin learns from pinhole images, h_pan from panoramic images, and the target
    branch from class-mixes between the two source types.
    """
    cfg = validate_config(cfg)
    if isinstance(data, DomainSet):
        data = TrainData.from_domainset(data, (cfg.pretrain_height, cfg.pretrain_width))
    student = build_student(cfg)
    if cfg.pretrain_iters == 0:
        warnings.warn("pretrain_iters=0: returning a randomly initialized model", RuntimeWarning)
        return student, TeacherState.from_student(student, cfg.gamma)

    rng = np.random.default_rng([cfg.seed, 101])
    gen = torch.Generator().manual_seed(cfg.seed * 7919 + 17)
    aug = AugmentParams.from_config(cfg) if cfg.pretrain_augment else AugmentParams(0, 0, 0, 0, 1.0, 0, 0)
    opt = torch.optim.SGD(student.parameters(), lr=cfg.lr_pretrain, momentum=cfg.momentum_S,
                          weight_decay=cfg.wd_S)
    student.train()
    b = cfg.pretrain_batch
    for it in range(cfg.pretrain_iters):
        for group in opt.param_groups:
            group["lr"] = _poly(cfg.lr_pretrain, it, cfg.pretrain_iters)
        xu, yu = _draw(data.pin, rng, b)
        xv, yv = _draw(data.pan, rng, b)
        xs, ys = [], []
        for x, y in zip(torch.cat([xu, xv]), torch.cat([yu, yv])):
            x, y = augment(x, y, aug, gen)
            xs.append(x)
            ys.append(y)
        xu, xv = torch.stack(xs[:b]), torch.stack(xs[b:])
        yu, yv = torch.stack(ys[:b]), torch.stack(ys[b:])
        mixed, mixed_y = [], []
        for j in range(b):
            # alternate which source type is pasted onto which
            src, dst = ((xu[j], yu[j]), (xv[j], yv[j])) if j % 2 == 0 else ((xv[j], yv[j]), (xu[j], yu[j]))
            m = class_mix(src[0], src[1], dst[0], dst[1], gen)
            mixed.append(m.image)
            mixed_y.append(m.labels)
        xm, ym = torch.stack(mixed), torch.stack(mixed_y)

        size = xu.shape[2:]
        feats = student.f(torch.cat([xu, xv, xm]))
        _, lp = student.h_pin(feats[:b])
        _, lq = student.h_pan(feats[b:2 * b])
        out = student.heads(feats[2 * b:], size)
        l_pin = cross_entropy(student.upsample(lp, size), yu)
        l_pan = cross_entropy(student.upsample(lq, size), yv)
        l_mix = cross_entropy(out.logits_t, ym)
        loss = l_pin + l_pan + l_mix
        opt.zero_grad()
        loss.backward()
        opt.step()
        if callback is not None:
            callback(it, {"l_pin": l_pin.item(), "l_pan": l_pan.item(), "l_mix": l_mix.item()})
    student.eval()
    return student, TeacherState.from_student(student, cfg.gamma)


# ---------------------------------------------------------------------------
# adaptation

@dataclass
class RunState:
    cfg: TrainConfig
    iteration: int
    student: SegModel
    teacher: TeacherState
    F: DeformationNetwork | None
    D: dict[str, DvD]
    opt_S: torch.optim.Optimizer
    opt_F: torch.optim.Optimizer | None
    opt_D: dict[str, torch.optim.Optimizer]
    rng: np.random.Generator
    gen: torch.Generator
    ledger: list[dict] = field(default_factory=list)
    trace: list[str] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)


def init_run_state(cfg: TrainConfig, student: SegModel, teacher: TeacherState | None = None) -> RunState:
    """Fresh adaptation state; the given models are copied, never mutated."""
    cfg = validate_config(cfg)
    student = copy.deepcopy(student)
    student.train()
    teacher = TeacherState.from_student(student, cfg.gamma) if teacher is None else copy.deepcopy(teacher)
    teacher.gamma = cfg.gamma
    teacher.model.eval()
    f_net, discs, opt_f, opt_d = None, {}, None, {}
    if cfg.use_usm:
        f_net, discs = build_morph(cfg)
        opt_f = torch.optim.Adam(f_net.parameters(), lr=cfg.lr_F, weight_decay=cfg.wd_F)
        opt_d = {k: torch.optim.RMSprop(d.parameters(), lr=cfg.lr_D, weight_decay=cfg.wd_D)
                 for k, d in discs.items()}
    opt_s = torch.optim.SGD(student.parameters(), lr=cfg.lr_S, momentum=cfg.momentum_S, weight_decay=cfg.wd_S)
    return RunState(cfg, 0, student, teacher, f_net, discs, opt_s, opt_f, opt_d,
                    np.random.default_rng([cfg.seed, 202]),
                    torch.Generator().manual_seed(cfg.seed * 104729 + 3))


def _finite(*values) -> bool:
    return all(math.isfinite(v.item() if isinstance(v, torch.Tensor) else v) for v in values)


def adapt_step(state: RunState, batch: Batch, probe: Callable[[str, RunState], None] | None = None) -> RunState:
    """One iteration of the adaptation loop; mutates and returns ``state``.

    ``probe(stage, state)`` is called after each sub-step, in ``STEP_ORDER``.
    """
    cfg, S, teacher = state.cfg, state.student, state.teacher
    state.trace = []

    def done(stage):
        state.trace.append(stage)
        if probe is not None:
            probe(stage, state)

    row = {k: "" for k in LEDGER_FIELDS}
    row["iteration"] = state.iteration + 1
    row["skipped"] = 0
    gen = state.gen

    # pseudo-labels from the current teacher
    pl = pseudo_labels(teacher, batch.t, cfg.eta)
    row["coverage"] = pl.coverage
    done("pseudo")

    # deformation fields (one pairing, hence one discriminator, per step)
    pairing = PAIRINGS[int(state.rng.integers(2))]
    row["pairing"] = pairing
    x_a = batch.v if pairing == "src_pan" else batch.t
    morph = None
    if cfg.use_usm:
        morph = morph_forward(state.F, batch.u, x_a, batch.y_u)
        x_i2a, y_i2a = morph.x_i2a.detach(), morph.y_i2a
    else:
        x_i2a, y_i2a = batch.u, batch.y_u
    done("deform")

    # color transfer, class-mix, augmentation
    draws = torch.rand(3, generator=gen)
    src_pin, src_pan, tgt = x_i2a[0], batch.v[0], batch.t[0]
    if draws[0] < cfg.p_lab:
        src_pin = lab_transfer(src_pin, tgt).float()
    if draws[1] < cfg.p_lab:
        src_pan = lab_transfer(src_pan, tgt).float()
    if draws[2] < 0.5:
        mix_src, mix_lab = src_pin, y_i2a[0]
    else:
        mix_src, mix_lab = src_pan, batch.delta[0]
    mix = class_mix(mix_src, mix_lab, tgt, pl.labels[0], gen)
    x_m, y_m = augment(mix.image, mix.labels, AugmentParams.from_config(cfg), gen)
    t_aug, y_t = augment(tgt, pl.labels[0], AugmentParams.from_config(cfg, erase=True), gen)
    done("mix")

    # segmentation update
    S.train()
    size = batch.u.shape[2:]
    feats = S.f(torch.stack([src_pin, src_pan, x_m, t_aug]))
    _, lp = S.h_pin(feats[0:1])
    _, lq = S.h_pan(feats[1:2])
    l_pin = cross_entropy(S.upsample(lp, size), y_i2a)
    l_pan = cross_entropy(S.upsample(lq, size), batch.delta)
    out = S.heads(feats[2:4], size)
    ys = torch.stack([y_m, y_t])
    d_kl_m, l_t_m = uncertainty_loss(_select(out, 0), ys[0:1])
    d_kl_t, l_t_t = uncertainty_loss(_select(out, 1), ys[1:2])
    l_t = l_t_m + l_t_t
    l_seg = seg_loss_total(l_pin, l_pan, l_t, cfg.beta)
    row.update(l_pin=l_pin.item(), l_pan=l_pan.item(), l_t=l_t.item(), l_seg=l_seg.item(),
               d_kl=((d_kl_m + d_kl_t) / 2).item())
    if not _finite(l_seg):
        return _skip(state, row, "non-finite segmentation loss")
    state.opt_S.zero_grad()
    l_seg.backward()
    state.opt_S.step()
    done("S")

    if cfg.use_usm:
        D = state.D[pairing]
        parts = adversarial_losses(D, grayscale(morph.x_i2a))
        parts.update(cycle_losses(batch.u, x_a, morph.phi_i2a, morph.phi_a2i, teacher.model))
        parts["l_smooth"] = smooth_loss(morph.phi_i2a, morph.phi_a2i)
        rep = morph_loss_total(parts, cfg.alpha, state.iteration + 1, cfg.max_its)
        if _finite(rep.l_morph_total):
            state.opt_F.zero_grad()
            rep.l_morph_total.backward()
            state.opt_F.step()
        else:
            state.diagnostics.append(f"iteration {row['iteration']}: non-finite morph loss, F update skipped")
        done("F")

        dis = discriminator_losses(D, grayscale(morph.x_i2a), grayscale(x_a))
        l_dis = dis["l_dis_img"] + dis["l_dis_pix"]
        if _finite(l_dis):
            state.opt_D[pairing].zero_grad()
            l_dis.backward()
            state.opt_D[pairing].step()
        else:
            state.diagnostics.append(f"iteration {row['iteration']}: non-finite discriminator loss, D update skipped")
        done("D")
        row.update(l_dis_img=dis["l_dis_img"].item(), l_dis_pix=dis["l_dis_pix"].item(),
                   l_adv_img=rep.l_adv_img.item(), l_adv_pix=rep.l_adv_pix.item(),
                   l_recon=rep.l_recon.item(), l_sem=rep.l_sem.item(), l_smooth=rep.l_smooth.item(),
                   l_morph=rep.l_morph_total.item())
    else:
        done("F")
        done("D")

    ema_update(teacher, S, cfg.gamma)
    done("teacher")
    state.iteration += 1
    state.ledger.append(row)
    return state


def _select(out, i):
    from .segnet import SegOutput

    return SegOutput(*(t[i:i + 1] for t in (out.logits_pin, out.logits_pan, out.logits_t,
                                            out.f_pin, out.f_pan, out.f_t, out.gate)))


def _skip(state: RunState, row: dict, reason: str) -> RunState:
    msg = f"iteration {row['iteration']}: {reason}"
    if not state.cfg.skip_nonfinite:
        raise NonFiniteLoss(msg)
    log.warning("%s; step skipped", msg)
    state.diagnostics.append(msg)
    state.opt_S.zero_grad()
    row["skipped"] = 1
    state.iteration += 1
    state.ledger.append(row)
    return state


# ---------------------------------------------------------------------------
# checkpoints and ledger

def save_checkpoint(state: RunState, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": state.cfg.to_dict(),
        "iteration": state.iteration,
        "student": state.student.state_dict(),
        "teacher": state.teacher.model.state_dict(),
        "F": None if state.F is None else state.F.state_dict(),
        "D": {k: d.state_dict() for k, d in state.D.items()},
        "opt_S": state.opt_S.state_dict(),
        "opt_F": None if state.opt_F is None else state.opt_F.state_dict(),
        "opt_D": {k: o.state_dict() for k, o in state.opt_D.items()},
        "rng": state.rng.bit_generator.state,
        "gen": state.gen.get_state(),
        "ledger": state.ledger,
        "diagnostics": state.diagnostics,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> RunState:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    if "opt_S" not in payload:
        raise CheckpointError(f"{path}: not a run checkpoint (model-only file?)")
    cfg = validate_config(payload["config"])
    student = SegModel(cfg.num_classes)
    student.load_state_dict(payload["student"])
    state = init_run_state(cfg, student)
    state.student.load_state_dict(payload["student"])
    state.teacher.model.load_state_dict(payload["teacher"])
    state.opt_S.load_state_dict(payload["opt_S"])
    if cfg.use_usm:
        state.F.load_state_dict(payload["F"])
        state.opt_F.load_state_dict(payload["opt_F"])
        for k in PAIRINGS:
            state.D[k].load_state_dict(payload["D"][k])
            state.opt_D[k].load_state_dict(payload["opt_D"][k])
    state.iteration = payload["iteration"]
    state.rng.bit_generator.state = payload["rng"]
    state.gen.set_state(payload["gen"])
    state.ledger = list(payload["ledger"])
    state.diagnostics = list(payload["diagnostics"])
    return state


def save_model(model: SegModel, path: str | Path, cfg: TrainConfig | None = None, teacher: TeacherState | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "num_classes": model.num_classes,
        "config": None if cfg is None else cfg.to_dict(),
        "student": model.state_dict(),
        "teacher": None if teacher is None else teacher.model.state_dict(),
    }, path)


def load_model(path: str | Path) -> tuple[SegModel, TeacherState]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    if "student" not in payload:
        raise CheckpointError(f"{path}: no segmentation model in checkpoint")
    num_classes = payload.get("num_classes") or payload["config"]["num_classes"]
    model = SegModel(num_classes)
    model.load_state_dict(payload["student"])
    model.eval()
    teacher = TeacherState.from_student(model)
    if payload.get("teacher") is not None:
        teacher.model.load_state_dict(payload["teacher"])
    return model, teacher


def ledger_text(cfg: TrainConfig, rows: list[dict]) -> str:
    buf = io.StringIO()
    for line in dump_config(cfg).splitlines():
        buf.write(f"# {line}\n")
    w = csv.DictWriter(buf, fieldnames=LEDGER_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def read_ledger(path: str | Path) -> list[dict]:
    lines = [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


def _append_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LEDGER_FIELDS, lineterminator="\n")
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def run_adaptation(cfg: TrainConfig, data: DomainSet | TrainData, student: SegModel | None = None,
                   teacher: TeacherState | None = None, out_dir: str | Path | None = None,
                   resume: RunState | None = None, stop_after: int | None = None,
                   callback: Callable[[RunState], None] | None = None) -> tuple[SegModel, RunState]:
    """Run the adaptation loop up to ``cfg.max_its`` steps and return the student.

    With ``out_dir`` the ledger goes to ``out_dir/ledger.csv`` and checkpoints to
    ``out_dir/checkpoints``. ``stop_after`` ends the run early (used to emulate an
    interruption); ``resume`` continues from a loaded checkpoint.
    """
    cfg = validate_config(cfg)
    if isinstance(data, DomainSet):
        data = TrainData.from_domainset(data, (cfg.height, cfg.width))
    if resume is not None:
        state = resume
    else:
        if student is None:
            raise ValueError("a pre-trained student is required")
        state = init_run_state(cfg, student, teacher)

    every = cfg.checkpoint_every or max(1, cfg.max_its // 10)
    ledger_path = ckpt_dir = None
    pending: list[int] = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt_dir = out_dir / "checkpoints"
        out_dir.mkdir(parents=True, exist_ok=True)
        ledger_path = out_dir / "ledger.csv"
        ledger_path.write_text(ledger_text(state.cfg, state.ledger))

    def checkpoint(final=False):
        try:
            save_checkpoint(state, ckpt_dir / f"step_{state.iteration:06d}.pt")
            save_checkpoint(state, ckpt_dir / "last.pt")
            pending.clear()
        except OSError as exc:
            pending.append(state.iteration)
            log.warning("checkpoint at iteration %d failed: %s", state.iteration, exc)
            if final:
                raise CheckpointError(f"final checkpoint failed: {exc}", state) from exc

    while state.iteration < cfg.max_its:
        if stop_after is not None and state.iteration >= stop_after:
            return state.student, state
        n_before = len(state.ledger)
        adapt_step(state, draw_batch(data, state.rng))
        if ledger_path is not None:
            _append_rows(ledger_path, state.ledger[n_before:])
            if state.iteration % every == 0 or pending:
                checkpoint()
        if callback is not None:
            callback(state)
    if ckpt_dir is not None:
        checkpoint(final=True)
    state.student.eval()
    return state.student, state
