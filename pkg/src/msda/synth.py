"""Synthetic multi-domain bundles for demos, tests, and the acceptance suite.

The task is deliberately separable across domains: the label is carried by
sentiment tokens shared between all domains, while filler tokens (and an
optional always-present domain-marker token) are domain-specific. A model
generalizing from the shared tokens reaches perfect held-out accuracy; the
marker gives a domain probe something to find.
"""
from __future__ import annotations

from .data import DatasetBundle, Example
from .seeding import stable_rng

POSITIVE_TOKENS = ("wonderful", "excellent", "superb", "delightful")
NEGATIVE_TOKENS = ("terrible", "awful", "dreadful", "unbearable")


def synthetic_bundle(
    domains: tuple[str, ...] = ("alpha", "beta", "gamma"),
    examples_per_domain: int = 600,
    seed: int = 0,
    domain_marker: bool = True,
    filler_vocab: int = 30,
) -> DatasetBundle:
    """Label-balanced bundle of separable token-pattern texts."""
    sources = {}
    for domain in domains:
        rng = stable_rng("synth", seed, domain)
        fillers = [f"{domain}w{i}" for i in range(filler_vocab)]
        examples = []
        for i in range(examples_per_domain):
            label = i % 2
            tokens = [rng.choice(fillers) for _ in range(rng.randint(6, 10))]
            cue = rng.choice(POSITIVE_TOKENS if label == 1 else NEGATIVE_TOKENS)
            tokens.insert(rng.randrange(len(tokens) + 1), cue)
            if domain_marker:
                tokens.insert(rng.randrange(len(tokens) + 1), f"{domain}marker")
            examples.append(
                Example(
                    id=f"{domain}-{i:05d}",
                    text=" ".join(tokens),
                    domain=domain,
                    label=label,
                )
            )
        sources[domain] = tuple(examples)
    return DatasetBundle(sources=sources)
