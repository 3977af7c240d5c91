import numpy as np
import pytest
import torch
import torch.nn.functional as F


def smooth_field(seed: int, h: int, w: int, amp: float, dtype=torch.float64, knots=(3, 3),
                 channels: int = 2) -> torch.Tensor:
    """Random smooth (1, channels, h, w) map, bicubic through a coarse knot grid, |value| <= amp."""
    g = torch.Generator().manual_seed(seed)
    coarse = torch.randn(1, channels, *knots, generator=g, dtype=dtype)
    f = F.interpolate(coarse, size=(h, w), mode="bicubic", align_corners=True)
    return amp * f / f.abs().max()


def smooth_image(seed: int, h: int, w: int, dtype=torch.float64) -> torch.Tensor:
    """Random band-limited RGB image in [0, 1]."""
    return 0.5 + smooth_field(seed, h, w, 0.5, dtype, knots=(8, 8), channels=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    torch.set_num_threads(max(1, torch.get_num_threads()))


def central_diff_grad(fn, params, eps=1e-6):
    """Central finite differences of scalar ``fn()`` with respect to every entry of ``params``."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                hi = fn().item()
                flat[i] = old - eps
                lo = fn().item()
                flat[i] = old
                gflat[i] = (hi - lo) / (2 * eps)
            grads.append(g)
    return grads


def rel_error(analytic, numeric) -> float:
    a = torch.cat([t.reshape(-1) for t in analytic])
    n = torch.cat([t.reshape(-1) for t in numeric])
    return ((a - n).norm() / max(a.norm().item(), n.norm().item(), 1e-300)).item()


def check_gradients(fn, params, eps=1e-6) -> float:
    """Relative error between autograd and central differences for scalar ``fn()``."""
    for p in params:
        p.grad = None
    fn().backward()
    analytic = [p.grad.detach().clone() for p in params]
    return rel_error(analytic, central_diff_grad(fn, params, eps))


ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    """Remember one acceptance verdict; all of them are printed at the end of the session."""
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
