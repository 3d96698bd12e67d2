"""Gradient-reversal domain-adversarial branch.

The reversal operator is identity on the forward pass and negates the
incoming gradient on the backward pass, so minimizing the domain
cross-entropy trains the domain classifier normally while pushing the host
encoder toward domain-confusing representations. The loss weighting gamma
lives in the combined training objective, not here.
"""
from __future__ import annotations

import math

import torch
from torch import nn

from .seeding import stable_seed


class AdversarialError(ValueError):
    """Invalid adversarial branch configuration or input."""


class GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg()


def grl_forward(x) -> torch.Tensor:
    """Identity with a gradient-negating backward hook."""
    return GradientReversal.apply(torch.as_tensor(x))


def grl_backward(upstream_grad) -> torch.Tensor:
    """The backward rule itself: plain negation of the upstream gradient."""
    return -torch.as_tensor(upstream_grad)


class DomainAdvBranch(nn.Module):
    """Linear domain classifier fed through gradient reversal.

    Attaches to the pooled representation of a configurable host-encoder
    layer. ``num_domains`` is K+1 in the transductive setting (the
    unlabelled target counts as its own domain) and K when restricted to
    sources only.
    """

    def __init__(self, dim: int, num_domains: int, attach_layer: int, seed: int = 0):
        super().__init__()
        if num_domains < 2:
            raise AdversarialError(f"need at least 2 domains, got {num_domains}")
        if attach_layer < 1:
            raise AdversarialError(f"attach_layer must be >= 1, got {attach_layer}")
        self.attach_layer = attach_layer
        self.num_domains = num_domains
        self.classifier = nn.Linear(dim, num_domains)
        gen = torch.Generator().manual_seed(stable_seed("domain-adv-branch", seed))
        bound = 1.0 / math.sqrt(dim)
        with torch.no_grad():
            self.classifier.weight.uniform_(-bound, bound, generator=gen)
            self.classifier.bias.zero_()

    def forward(self, layer_rep: torch.Tensor) -> torch.Tensor:
        """Domain logits from a (B, d) or (d,) pooled layer representation."""
        return self.classifier(grl_forward(layer_rep))


def domain_adv_loss(branch: DomainAdvBranch, layer_rep: torch.Tensor, true_domain) -> torch.Tensor:
    """Cross-entropy of the reversed-gradient domain classifier.

    ``true_domain`` is one index or a (B,) tensor of indices. Gradients
    reach the branch parameters normally and the host encoder (through
    ``layer_rep``) with flipped sign.
    """
    logits = branch(layer_rep)
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    targets = torch.as_tensor(true_domain, dtype=torch.long, device=logits.device).reshape(-1)
    if int(targets.max()) >= branch.num_domains or int(targets.min()) < 0:
        raise AdversarialError(
            f"domain index out of range: {targets.tolist()} with {branch.num_domains} domains"
        )
    return nn.functional.cross_entropy(logits, targets)
