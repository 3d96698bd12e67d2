"""Shared fixtures and numeric helpers for the test suite."""
from __future__ import annotations

import random

import pytest
import torch

from msda.data import DatasetBundle, Example


def make_example(i: int, domain: str, label=None, text: str | None = None) -> Example:
    return Example(
        id=f"{domain}-{i}",
        text=text if text is not None else f"token{i} filler{domain} more{i % 3}",
        domain=domain,
        label=label,
    )


def make_bundle(domains=("a", "b"), per_domain=6) -> DatasetBundle:
    sources = {
        d: tuple(make_example(i, d, label=i % 2) for i in range(per_domain)) for d in domains
    }
    return DatasetBundle(sources=sources)


def finite_difference_grads(loss_fn, params, max_coords=40, eps=1e-5, seed=0):
    """Central-difference gradients on a sampled coordinate subset.

    Mutates and restores the (double-precision) parameters in place. Yields
    (param_index, flat_coordinate, fd_gradient).
    """
    rng = random.Random(seed)
    out = []
    with torch.no_grad():
        for pi, p in enumerate(params):
            flat = p.view(-1)
            n = flat.numel()
            coords = list(range(n)) if n <= max_coords else sorted(rng.sample(range(n), max_coords))
            for c in coords:
                orig = flat[c].item()
                flat[c] = orig + eps
                plus = float(loss_fn())
                flat[c] = orig - eps
                minus = float(loss_fn())
                flat[c] = orig
                out.append((pi, c, (plus - minus) / (2 * eps)))
    return out


def assert_grads_match(analytic: list[torch.Tensor], fd_entries, rel_tol=1e-4, skip_below=1e-7):
    """Elementwise relative comparison, skipping coordinates that are ~0 on both sides."""
    checked = 0
    for pi, c, fd in fd_entries:
        a = float(analytic[pi].view(-1)[c])
        if abs(a) < skip_below and abs(fd) < skip_below:
            continue
        rel = abs(a - fd) / max(abs(a), abs(fd))
        assert rel < rel_tol, f"param {pi} coord {c}: analytic {a} vs fd {fd} (rel {rel:.2e})"
        checked += 1
    assert checked > 0, "no informative coordinates were compared"


@pytest.fixture(autouse=True)
def _fixed_torch_threads():
    torch.set_num_threads(1)
    yield
