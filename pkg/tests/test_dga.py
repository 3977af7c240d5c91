import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from panoda.datamodel import IGNORE
from panoda.dga import (AugmentParams, TeacherState, augment, class_mix, cross_entropy, ema_update,
                        lab_to_rgb, lab_transfer, pixel_kl, pseudo_labels, rgb_to_lab, seg_loss_total,
                        supervised_losses, threshold_probs, uncertainty_loss)
from panoda.segnet import SegModel, SegOutput

from conftest import check_gradients

D = torch.float64
NO_AUG = AugmentParams(p_flip=0, p_jitter=0, p_blur=0, p_erase=0)


def tiny_model(seed=0, num_classes=5):
    torch.manual_seed(seed)
    return SegModel(num_classes, widths=(8, 8, 8, 8), branch_width=8, gate_hidden=8).double()


# EMA

def _flat(model):
    return torch.cat([t.reshape(-1).double() for t in model.state_dict().values()])


def test_ema_gamma_one_and_zero():
    student, teacher = tiny_model(1), TeacherState.from_student(tiny_model(2))
    before = {k: v.clone() for k, v in teacher.model.state_dict().items()}
    ema_update(teacher, student, 1.0)
    assert all(torch.equal(before[k], v) for k, v in teacher.model.state_dict().items())
    ema_update(teacher, student, 0.0)
    assert all(torch.equal(student.state_dict()[k], v) for k, v in teacher.model.state_dict().items())


def test_ema_value_and_formula():
    student, teacher = tiny_model(1), TeacherState.from_student(tiny_model(2), 0.999)
    for p in teacher.model.parameters():
        p.data.fill_(1.0)
    for p in student.parameters():
        p.data.zero_()
    ema_update(teacher, student)
    assert all((p == 0.999).all() for p in teacher.model.parameters())
    student, teacher = tiny_model(3), TeacherState.from_student(tiny_model(4), 0.9)
    t0 = [p.detach().clone() for p in teacher.model.parameters()]
    ema_update(teacher, student)
    for a, t, s in zip(teacher.model.parameters(), t0, student.parameters()):
        assert torch.equal(a, 0.9 * t + (1 - 0.9) * s)


def test_ema_twice_is_gamma_squared():
    student = tiny_model(1)
    a, b = TeacherState.from_student(tiny_model(2)), TeacherState.from_student(tiny_model(2))
    ema_update(a, student, 0.7)
    ema_update(a, student, 0.7)
    ema_update(b, student, 0.49)
    assert (_flat(a.model) - _flat(b.model)).abs().max() <= 1e-15


def test_ema_shape_mismatch():
    with pytest.raises(ValueError):
        ema_update(TeacherState.from_student(tiny_model(0, 5)), tiny_model(0, 4))


def test_teacher_frozen():
    t = TeacherState.from_student(tiny_model())
    assert not any(p.requires_grad for p in t.model.parameters())


# pseudo-labels

def test_threshold_examples():
    probs = torch.tensor([[0.96, 0.6], [0.04, 0.4]], dtype=D).view(1, 2, 1, 2)
    pl = threshold_probs(probs, 0.95)
    assert pl.labels.tolist() == [[[0, IGNORE]]]
    assert pl.coverage == 0.5
    assert (threshold_probs(probs, 0.0).labels != IGNORE).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_ignore_fraction_monotone_in_eta(seed, e1, e2):
    g = torch.Generator().manual_seed(seed)
    probs = torch.softmax(3 * torch.randn(1, 5, 8, 8, generator=g), dim=1)
    lo, hi = sorted((e1, e2))
    assert threshold_probs(probs, lo).coverage >= threshold_probs(probs, hi).coverage


def test_pseudo_labels_carry_no_gradient():
    t = TeacherState.from_student(tiny_model())
    pl = pseudo_labels(t, torch.rand(2, 3, 16, 16, dtype=D), 0.0)
    assert not pl.labels.requires_grad and not pl.confidence.requires_grad
    assert pl.labels.shape == (2, 16, 16)


# class-mix

def test_class_mix_single_class_is_source():
    src, tgt = torch.rand(3, 4, 4), torch.rand(3, 4, 4)
    m = class_mix(src, torch.full((4, 4), 2), tgt, torch.zeros(4, 4, dtype=torch.long))
    assert m.mask.all() and torch.equal(m.image, src) and (m.labels == 2).all()


def test_class_mix_hand_example():
    src_lab = torch.tensor([[0, 1], [0, 1]])
    tgt_lab = torch.tensor([[3, IGNORE], [4, 2]])
    src, tgt = torch.rand(3, 2, 2), torch.rand(3, 2, 2)
    m = class_mix(src, src_lab, tgt, tgt_lab, classes=[0])
    assert m.mask.tolist() == [[True, False], [True, False]]
    assert m.labels.tolist() == [[0, IGNORE], [0, 2]]


def test_class_mix_needs_labels():
    with pytest.raises(ValueError):
        class_mix(torch.rand(3, 2, 2), torch.full((2, 2), IGNORE), torch.rand(3, 2, 2), torch.zeros(2, 2))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_class_mix_provenance(seed):
    g = torch.Generator().manual_seed(seed)
    src, tgt = torch.rand(3, 8, 8, generator=g), torch.rand(3, 8, 8, generator=g)
    src_lab = torch.randint(0, 5, (8, 8), generator=g)
    src_lab[0, 0] = IGNORE
    tgt_lab = torch.randint(0, 5, (8, 8), generator=g)
    m = class_mix(src, src_lab, tgt, tgt_lab, generator=g)
    present = set(src_lab.unique().tolist()) - {IGNORE}
    chosen = set(src_lab[m.mask].unique().tolist())
    assert len(chosen) == math.ceil(len(present) / 2) and chosen <= present
    assert torch.equal(m.image[:, m.mask], src[:, m.mask])
    assert torch.equal(m.image[:, ~m.mask], tgt[:, ~m.mask])
    assert torch.equal(m.labels[m.mask], src_lab[m.mask])
    assert torch.equal(m.labels[~m.mask], tgt_lab[~m.mask])


# augmentation

def test_augment_identity_when_disabled():
    img, lab = torch.rand(3, 8, 12), torch.randint(0, 5, (8, 12))
    out, out_lab = augment(img, lab, NO_AUG, torch.Generator().manual_seed(0))
    assert torch.equal(out, img) and torch.equal(out_lab, lab)


def test_flip_is_paired():
    img = torch.rand(3, 8, 12)
    lab = torch.randint(0, 5, (8, 12))
    out, out_lab = augment(img, lab, AugmentParams(p_flip=1, p_jitter=0, p_blur=0, p_erase=0))
    assert torch.equal(out, img.flip(-1)) and torch.equal(out_lab, lab.flip(-1))


def test_photometric_never_touches_labels():
    img, lab = torch.rand(3, 16, 16), torch.randint(0, 5, (16, 16))
    p = AugmentParams(p_flip=0, p_jitter=1, p_blur=1, p_erase=1)
    out, out_lab = augment(img, lab, p, torch.Generator().manual_seed(3))
    assert torch.equal(out_lab, lab)
    assert out.min() >= 0 and out.max() <= 1 and not torch.equal(out, img)


def test_augment_stream_position_independent_of_outcome():
    g1, g2 = torch.Generator().manual_seed(5), torch.Generator().manual_seed(5)
    augment(torch.rand(3, 8, 8), None, NO_AUG, g1)
    augment(torch.rand(3, 8, 8), None, AugmentParams(1, 1, 0.2, 1, 1.0, 1, 0.2), g2)
    assert torch.equal(torch.rand(4, generator=g1), torch.rand(4, generator=g2))


def test_lab_round_trip_and_self_transfer():
    img = torch.rand(3, 16, 16, dtype=D, generator=torch.Generator().manual_seed(0))
    assert (lab_to_rgb(rgb_to_lab(img)) - img).abs().max() <= 1e-12
    assert (lab_transfer(img, img) - img).abs().max() <= 1e-6


def test_lab_white_point():
    lab = rgb_to_lab(torch.ones(3, 1, 1, dtype=D))
    assert lab[0].item() == pytest.approx(100.0, abs=1e-9)
    assert abs(lab[1].item()) < 1e-4 and abs(lab[2].item()) < 1e-4


def test_lab_transfer_matches_statistics():
    g = torch.Generator().manual_seed(1)
    src = 0.2 + 0.3 * torch.rand(3, 16, 16, dtype=D, generator=g)
    ref = 0.4 + 0.4 * torch.rand(3, 16, 16, dtype=D, generator=g)
    out = rgb_to_lab(lab_transfer(src, ref))
    ref_lab = rgb_to_lab(ref)
    assert torch.allclose(out.mean(dim=(1, 2)), ref_lab.mean(dim=(1, 2)), atol=0.5)


# losses

def test_cross_entropy_uniform_is_ln5():
    logits = torch.zeros(2, 5, 4, 4, dtype=D)
    labels = torch.randint(0, 5, (2, 4, 4))
    assert cross_entropy(logits, labels).item() == pytest.approx(math.log(5), abs=1e-12)


def test_cross_entropy_confident_goes_to_zero():
    labels = torch.randint(0, 5, (1, 4, 4))
    logits = 100.0 * F.one_hot(labels, 5).permute(0, 3, 1, 2).double()
    assert cross_entropy(logits, labels).item() < 1e-30


def test_ignore_pixels_have_no_influence():
    labels = torch.randint(0, 5, (1, 4, 4))
    labels[0, :2] = IGNORE
    logits = torch.randn(1, 5, 4, 4, dtype=D, requires_grad=True)
    cross_entropy(logits, labels).backward()
    assert logits.grad[0, :, :2].abs().max() == 0
    with pytest.raises(ValueError):
        cross_entropy(logits, torch.full((1, 4, 4), IGNORE))


def test_supervised_losses_shapes():
    m = tiny_model()
    x = torch.rand(2, 3, 16, 16, dtype=D)
    y = torch.randint(0, 5, (2, 16, 16))
    out = supervised_losses(m, x, y, x, y)
    assert set(out) == {"l_pin", "l_pan"} and all(v.ndim == 0 for v in out.values())


def _two_class(p):
    p = torch.as_tensor(p, dtype=D)
    return torch.log(p.clamp(min=1e-300)).view(1, -1, 1, 1)


def test_kl_ln2():
    kl = pixel_kl(_two_class([1.0, 0.0]), _two_class([0.5, 0.5]))
    assert kl.item() == pytest.approx(math.log(2), abs=1e-12)


def _seg_output(lp, lq, lt):
    z = torch.zeros(1, 1, 1, 1, dtype=D)
    return SegOutput(lp, lq, lt, z, z, z, z)


def test_uncertainty_identical_branches():
    lp = torch.randn(1, 5, 4, 4, dtype=D)
    lt = torch.randn(1, 5, 4, 4, dtype=D)
    y = torch.randint(0, 5, (1, 4, 4))
    d_kl, l_t = uncertainty_loss(_seg_output(lp, lp, lt), y)
    assert abs(d_kl.item()) <= 1e-12
    assert l_t.item() == pytest.approx(F.cross_entropy(lt, y).item(), abs=1e-12)


def test_uncertainty_per_pixel_weighting_by_hand():
    lp = torch.randn(1, 3, 2, 2, dtype=D)
    lq = torch.randn(1, 3, 2, 2, dtype=D)
    lt = torch.randn(1, 3, 2, 2, dtype=D)
    y = torch.tensor([[[0, 2], [IGNORE, 1]]])
    d_kl, l_t = uncertainty_loss(_seg_output(lp, lq, lt), y)
    terms, kls = [], []
    for i, j in [(0, 0), (0, 1), (1, 1)]:
        p = torch.softmax(lp[0, :, i, j], 0)
        q = torch.softmax(lq[0, :, i, j], 0)
        kl = (p * (p.log() - q.log())).sum().item()
        ce = -torch.log_softmax(lt[0, :, i, j], 0)[y[0, i, j]].item()
        terms.append(math.exp(-kl) * ce + kl)
        kls.append(kl)
    assert l_t.item() == pytest.approx(sum(terms) / 3, abs=1e-12)
    assert d_kl.item() == pytest.approx(sum(kls) / 3, abs=1e-12)


def test_uncertainty_large_kl_suppresses_ce():
    lp = _two_class([1 - 1e-12, 1e-12])
    lq = _two_class([1e-12, 1 - 1e-12])
    lt = _two_class([1e-6, 1 - 1e-6])
    d_kl, l_t = uncertainty_loss(_seg_output(lp, lq, lt), torch.zeros(1, 1, 1, dtype=torch.long))
    ce = -math.log(1e-6)
    assert d_kl.item() > 20
    assert math.exp(-d_kl.item()) * ce < 1e-6
    assert l_t.item() == pytest.approx(d_kl.item(), rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_kl_nonnegative_and_zero_iff_equal(seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(1, 4, 3, 3, dtype=D, generator=g), torch.randn(1, 4, 3, 3, dtype=D, generator=g)
    assert (pixel_kl(a, b) >= -1e-15).all()
    assert pixel_kl(a, a + 3.0).abs().max() <= 1e-9
    assert (pixel_kl(a, b) > 1e-9).all()


def test_seg_total():
    one = torch.tensor(1.0, dtype=D)
    assert seg_loss_total(one, one, one, 0.5).item() == 2.5
    assert seg_loss_total(one, one, one, 1.0).item() == 3.0
    assert seg_loss_total(one, 2 * one, 0 * one, 7.0).item() == 3.0
    with pytest.raises(ValueError):
        seg_loss_total(one, one, one, 0.0)


def test_l_t_gradient_check():
    m = tiny_model(7)
    x = torch.rand(1, 3, 8, 8, dtype=D, generator=torch.Generator().manual_seed(0))
    y = torch.randint(0, 5, (1, 8, 8), generator=torch.Generator().manual_seed(1))
    y[0, 0, :3] = IGNORE
    with torch.no_grad():
        torch.nn.init.normal_(m.g.body[-1].weight, std=0.2)
    params = [m.h_t.weight, m.h_t.bias, m.h_pin.classifier.weight, m.h_pan.classifier.bias,
              m.g.body[-1].weight]

    def loss():
        return uncertainty_loss(m(x), y)[1]

    assert check_gradients(loss, params) <= 1e-4
