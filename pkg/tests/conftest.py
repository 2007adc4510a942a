import time

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from semvq.data import synthetic_dataset
from semvq.networks import desk_config
from semvq.training import TrainConfig, finetune, parameter_hash, train_stage_s, train_stage_x

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

torch.set_num_threads(1)

CRITERIA: dict[int, tuple[bool, str]] = {}


def tiny_config(**overrides):
    """Smallest sensible network: fast enough for per-test construction."""
    cfg = dict(latent_channels=16, base_channels=8, pe_channels=8, spade_hidden=8, scorer_hidden=8,
               disc_channels=8, codebook_size=64)
    cfg.update(overrides)
    return desk_config(**cfg)


def central_difference(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``f`` at ``x`` (double precision), one entry at a time."""
    x = x.detach().clone().double()
    grad = torch.zeros_like(x)
    flat, g = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + eps
            hi = float(f(x))
            flat[i] = old - eps
            lo = float(f(x))
            flat[i] = old
            g[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = a.double(), b.double()
    return float((a - b).norm() / max(float(a.norm()), float(b.norm()), 1e-12))


def record_criterion(n: int, ok: bool, detail: str) -> None:
    CRITERIA[n] = (ok, detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


SMOKE_STEPS = (200, 500, 50)


def smoke_run():
    """Both stages and a short fine-tune on 8 synthetic 64x128 scenes."""
    t0 = time.perf_counter()
    data = synthetic_dataset(8, seed=0)
    base = dict(lr=1e-3, batch=8, epochs_stage=SMOKE_STEPS, augment=False, seed=0)
    ck_s = train_stage_s(data, TrainConfig(mask_set=(1.0,), mask_weights=(1.0,), **base), desk_config())
    ck_x = train_stage_x(data, TrainConfig(**base), desk_config())
    gs_before = parameter_hash(ck_s.model.gs)
    ck_f = finetune(data, TrainConfig(**base), ck_s, ck_x)
    return dict(data=data, ck_s=ck_s, ck_x=ck_x, ck_f=ck_f, gs_before=gs_before,
                seconds=time.perf_counter() - t0)


@pytest.fixture(scope="session")
def smoke_runs():
    return smoke_run(), smoke_run()
