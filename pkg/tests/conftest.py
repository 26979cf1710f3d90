import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

from kser.data import prepare  # noqa: E402
from kser.synthetic import SyntheticSpec, generate  # noqa: E402
from kser.training import make_splits  # noqa: E402


def fd_rel_error(loss_fn, tensors, eps=1e-6):
    """Worst norm-relative gap between autograd and central differences over ``tensors``."""
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [t.grad.detach().clone() for t in tensors]
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, analytic):
            flat = t.view(-1)
            num = torch.zeros_like(flat)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                fp = loss_fn().item()
                flat[i] = old - eps
                fm = loss_fn().item()
                flat[i] = old
                num[i] = (fp - fm) / (2 * eps)
            denom = max(float(g.norm()), float(num.norm()), 1e-12)
            worst = max(worst, float((g.view(-1) - num).norm()) / denom)
    return worst


@pytest.fixture(scope="session")
def small_synth():
    spec = SyntheticSpec(n_samples=3000, n_users=300, n_items=100, d_k=16, n_chunks=4)
    data = generate(spec, 0)
    prep = prepare(data.samples, history_len=10)
    return data, prep, make_splits(prep.train, prep.val, prep.test, data.pack)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
