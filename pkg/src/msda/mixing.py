"""Combining expert predictions: averaging, static fine-tuned weights, a
pretrained domain classifier, and learned dot-product attention.

All mixing happens in probability space. Weight vectors live on the
probability simplex over an ordered member list; experts are referenced by
their integer domain index and the global shared model by :data:`GLOBAL`.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch import nn

from .data import Example
from .encoders import TextEncoder
from .seeding import stable_seed

GLOBAL = "g"

SIMPLEX_TOL = 1e-6


class MixingError(ValueError):
    """Contract violation in a mixing operation."""


class ExpertBank(nn.Module):
    """K per-domain expert models plus one global shared model.

    Experts are ordered by the lexicographic rank of their domain name; the
    expert index of a prediction vector therefore matches
    ``DatasetBundle.domain_index()``.
    """

    def __init__(self, domains: Sequence[str], experts: Sequence[TextEncoder], shared: TextEncoder):
        super().__init__()
        if len(domains) != len(experts):
            raise MixingError(f"{len(domains)} domains but {len(experts)} experts")
        if len(experts) < 2:
            raise MixingError(f"an expert bank needs K >= 2 experts, got {len(experts)}")
        if tuple(domains) != tuple(sorted(domains)):
            raise MixingError("experts must be supplied in sorted domain order")
        dims = {e.config.dim for e in experts} | {shared.config.dim}
        if len(dims) != 1:
            raise MixingError(f"members disagree on representation width: {sorted(dims)}")
        self.domains = tuple(domains)
        self.experts = nn.ModuleList(experts)
        self.shared = shared
        self.trained = False

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def dim(self) -> int:
        return self.shared.config.dim

    def expert_for(self, domain: str) -> TextEncoder:
        return self.experts[self.domains.index(domain)]

    def member_probs(self, texts: Sequence[str], batch_size: int = 64) -> torch.Tensor:
        """(K+1, n) matrix of member probabilities, experts then global."""
        rows = []
        with torch.no_grad():
            for model in list(self.experts) + [self.shared]:
                probs = [
                    model.encode_batch(texts[i : i + batch_size]).probs
                    for i in range(0, len(texts), batch_size)
                ]
                rows.append(torch.cat(probs))
        return torch.stack(rows)


def _as_1d(values, name: str) -> torch.Tensor:
    # Python floats are doubles; keep that precision for non-tensor inputs.
    t = values if torch.is_tensor(values) else torch.as_tensor(values, dtype=torch.float64)
    if t.dim() != 1:
        raise MixingError(f"{name} must be one-dimensional, got shape {tuple(t.shape)}")
    return t


@dataclass
class MixWeights:
    """A point on the probability simplex over an ordered member subset."""

    weights: torch.Tensor
    members: tuple

    def __post_init__(self):
        self.weights = _as_1d(self.weights, "weights")
        self.members = tuple(self.members)
        if len(self.members) != self.weights.shape[0]:
            raise MixingError(
                f"{len(self.members)} members but {self.weights.shape[0]} weights"
            )
        if len(self.members) != len(set(self.members)):
            raise MixingError(f"duplicate members: {self.members}")
        w = self.weights.detach()
        if bool((w < -SIMPLEX_TOL).any()):
            raise MixingError(f"negative weight in {w.tolist()}")
        total = float(w.sum())
        if abs(total - 1.0) > SIMPLEX_TOL:
            raise MixingError(f"weights sum to {total}, not 1")

    def __len__(self) -> int:
        return len(self.members)

    def to_dict(self) -> dict:
        return {str(m): float(w) for m, w in zip(self.members, self.weights)}


def uniform_weights(members: Sequence) -> MixWeights:
    members = tuple(members)
    if not members:
        raise MixingError("member list is empty")
    return MixWeights(torch.full((len(members),), 1.0 / len(members), dtype=torch.float64), members)


def mix_weighted(probs, weights: MixWeights) -> torch.Tensor:
    """Weighted sum of member probabilities; differentiable when fed tensors."""
    p = _as_1d(probs, "probs")
    if p.shape[0] != len(weights):
        raise MixingError(f"{p.shape[0]} probabilities for {len(weights)} members")
    return (p * weights.weights.to(p.dtype)).sum()


def mix_average(expert_probs, global_prob) -> torch.Tensor:
    """Plain mean of the chosen expert probabilities and the global one."""
    p = _as_1d(expert_probs, "expert_probs")
    if p.shape[0] == 0:
        raise MixingError("expert subset is empty")
    g = global_prob if torch.is_tensor(global_prob) else torch.as_tensor(global_prob, dtype=torch.float64)
    g = g.reshape(1).to(p.dtype)
    members = tuple(range(p.shape[0])) + (GLOBAL,)
    return mix_weighted(torch.cat([p, g]), uniform_weights(members))


def domain_classifier_weights(dc_params: tuple, pooled) -> MixWeights:
    """Softmax over source domains from a pretrained, static linear classifier.

    ``dc_params`` is ``(weight, bias)`` with weight of shape (d, K) and bias
    of shape (K,); ``pooled`` is the global model's d-dimensional pooled
    representation of the input.
    """
    weight, bias = dc_params
    weight = weight if torch.is_tensor(weight) else torch.as_tensor(weight, dtype=torch.float64)
    bias = _as_1d(bias, "bias")
    r = _as_1d(pooled, "pooled")
    if weight.dim() != 2 or weight.shape[0] != r.shape[0]:
        raise MixingError(
            f"classifier weight shape {tuple(weight.shape)} does not match pooled width {r.shape[0]}"
        )
    if bias.shape[0] != weight.shape[1]:
        raise MixingError(f"bias length {bias.shape[0]} != {weight.shape[1]} domains")
    logits = r @ weight.to(r.dtype) + bias.to(r.dtype)
    return MixWeights(torch.softmax(logits, dim=0), tuple(range(weight.shape[1])))


def mix_domain_classifier(expert_probs, weights: MixWeights) -> torch.Tensor:
    """Domain-classifier mix: experts only, the global model never takes part."""
    if GLOBAL in weights.members:
        raise MixingError("domain-classifier mixing excludes the global model")
    p = _as_1d(expert_probs, "expert_probs")
    if weights.members != tuple(range(p.shape[0])):
        raise MixingError(
            f"weights must cover exactly the {p.shape[0]} experts, got members {weights.members}"
        )
    return mix_weighted(p, weights)


class AttentionParams(nn.Module):
    """Trainable square query/key projections for attention over members."""

    def __init__(self, dim: int, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.query = nn.Parameter(torch.empty(dim, dim))
        self.key = nn.Parameter(torch.empty(dim, dim))
        gen = torch.Generator().manual_seed(stable_seed("attention-params", seed))
        bound = 1.0 / math.sqrt(dim)
        with torch.no_grad():
            self.query.uniform_(-bound, bound, generator=gen)
            self.key.uniform_(-bound, bound, generator=gen)


def attention_logits_batch(
    params: AttentionParams, query_rep: torch.Tensor, member_reps: torch.Tensor, scale: bool = False
) -> torch.Tensor:
    """Dot-product attention logits: (B, d) query vs (B, M, d) member reps."""
    q = query_rep @ params.query.T.to(query_rep.dtype)  # (B, d)
    k = member_reps @ params.key.T.to(member_reps.dtype)  # (B, M, d)
    logits = (k @ q.unsqueeze(-1)).squeeze(-1)  # (B, M)
    if scale:
        logits = logits / math.sqrt(params.dim)
    return logits


def attention_weights_batch(
    params: AttentionParams, query_rep: torch.Tensor, member_reps: torch.Tensor, scale: bool = False
) -> torch.Tensor:
    return torch.softmax(attention_logits_batch(params, query_rep, member_reps, scale), dim=-1)


def attention_weights(
    params: AttentionParams,
    query_rep,
    member_reps: Sequence,
    members: Sequence,
    scale: bool = False,
) -> MixWeights:
    """Attention of the global query over member representations.

    ``member_reps`` must be ordered experts-then-global; restricting to a
    member subset means dropping rows before the softmax, never masking
    after it. Differentiable w.r.t. the projections and all representations.
    """
    members = tuple(members)
    if not members:
        raise MixingError("member list is empty")
    if len(member_reps) != len(members):
        raise MixingError(f"{len(member_reps)} representations for {len(members)} members")
    q = _as_1d(query_rep, "query_rep").unsqueeze(0)
    stacked = torch.stack([_as_1d(r, "member_rep") for r in member_reps]).unsqueeze(0)
    weights = attention_weights_batch(params, q, stacked, scale=scale)[0]
    return MixWeights(weights, members)


def finetune_average_search(
    bank: ExpertBank,
    val_set: Sequence[Example],
    trials: int,
    seed: int,
    metric: Callable[[Sequence[int], Sequence[int]], float],
) -> MixWeights:
    """Randomized grid search for static mixing weights on validation data.

    The bank is used frozen. Each trial draws one integer in {0..10} per
    member (experts then global; an all-zero draw is redrawn), normalizes to
    the simplex, scores thresholded mixed predictions with ``metric``, and
    the earliest best-scoring trial wins.
    """
    if not val_set:
        raise MixingError("validation set is empty")
    if any(ex.label is None for ex in val_set):
        raise MixingError("validation examples must be labelled")
    member_probs = bank.member_probs([ex.text for ex in val_set])
    members = tuple(range(bank.num_experts)) + (GLOBAL,)
    return search_static_weights(
        member_probs, members, [ex.label for ex in val_set], trials, seed, metric
    )


def search_static_weights(
    member_probs,
    members: Sequence,
    labels: Sequence[int],
    trials: int,
    seed: int,
    metric: Callable[[Sequence[int], Sequence[int]], float],
) -> MixWeights:
    """Matrix-level core of :func:`finetune_average_search`.

    ``member_probs`` is an (M, n) matrix of per-member validation
    probabilities aligned with ``members`` and ``labels``.
    """
    if trials < 1:
        raise MixingError(f"trials must be >= 1, got {trials}")
    probs = torch.as_tensor(member_probs, dtype=torch.float64)
    members = tuple(members)
    if probs.dim() != 2 or probs.shape[0] != len(members):
        raise MixingError(
            f"member_probs must be ({len(members)}, n), got {tuple(probs.shape)}"
        )
    if probs.shape[1] == 0 or len(labels) != probs.shape[1]:
        raise MixingError("validation set is empty or misaligned with member_probs")
    labels = list(labels)
    rng = random.Random(stable_seed("finetune-average", seed))
    best_score = -math.inf
    best: MixWeights | None = None
    for _ in range(trials):
        draw = [rng.randint(0, 10) for _ in members]
        while not any(draw):
            draw = [rng.randint(0, 10) for _ in members]
        weights = torch.tensor(draw, dtype=torch.float64) / sum(draw)
        mixed = weights @ probs
        preds = [1 if p >= 0.5 else 0 for p in mixed.tolist()]
        score = metric(preds, labels)
        if score > best_score:
            best_score = score
            best = MixWeights(weights, members)
    assert best is not None
    return best
