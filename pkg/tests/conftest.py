"""Shared fixtures plus the finite-difference gradient checker.

Acceptance tests call record() so every headline check shows up as one
PASS/FAIL line in the terminal summary, whatever order pytest ran them in.
"""

import numpy as np
import pytest
import torch

from asknav.encoder import EncoderConfig
from asknav.vocab import build_vocabulary
from asknav.world import generate_world

ACCEPTANCE = []


def record(name, ok, detail=""):
    ACCEPTANCE.append((name, bool(ok), detail))
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance checks")
    for name, ok, detail in ACCEPTANCE:
        line = f"{'PASS' if ok else 'FAIL'}  {name}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def world3():
    return generate_world(3)


@pytest.fixture(scope="session")
def world5():
    return generate_world(5)


@pytest.fixture(scope="session")
def vocab():
    return build_vocabulary()


@pytest.fixture(scope="session")
def tiny_enc():
    return EncoderConfig(num_layers=2, ff_dim=128)


def central_difference_error(loss_fn, modules, rng, coords=3, eps=1e-5):
    """Worst relative error between autograd and central differences.

    Modules must already be float64 and loss_fn must rebuild the graph on
    every call so the in-place parameter nudges are observed. Samples
    `coords` coordinates per parameter tensor.
    """
    params = [p for m in modules for p in m.parameters()]
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for p in params:
        if p.grad is None:
            continue
        flat = p.data.view(-1)
        grad = p.grad.view(-1)
        n = flat.numel()
        for i in rng.choice(n, size=min(coords, n), replace=False):
            i = int(i)
            keep = float(flat[i])
            flat[i] = keep + eps
            with torch.no_grad():
                up = float(loss_fn())
            flat[i] = keep - eps
            with torch.no_grad():
                down = float(loss_fn())
            flat[i] = keep
            numeric = (up - down) / (2 * eps)
            analytic = float(grad[i])
            scale = max(1.0, abs(numeric), abs(analytic))
            worst = max(worst, abs(numeric - analytic) / scale)
    return worst
