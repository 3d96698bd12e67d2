"""Post-hoc analyses: inter-expert agreement and 2-D projections of
learned representations.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .seeding import stable_rng
from .svg import heatmap_svg, scatter_svg


class AnalysisError(ValueError):
    """Invalid analysis input."""


def krippendorff_alpha(matrix, level: str = "nominal") -> float:
    """Chance-corrected agreement between raters, 1 - D_o / D_e.

    ``matrix`` is raters x items with no missing cells (every rater rates
    every item). Only the nominal level is supported; disagreement between
    two values is 0/1 identity. Expected disagreement uses the population
    form sum(n_v * n_k) / n^2, under which two raters with complementary
    predictions on a label-balanced set score exactly -1. When every cell
    holds the same value there is no expected disagreement and the
    convention is alpha = 1.
    """
    if level != "nominal":
        raise AnalysisError(f"only nominal level is supported, got {level!r}")
    rows = [list(row) for row in matrix]
    if len(rows) < 2:
        raise AnalysisError(f"need at least 2 raters, got {len(rows)}")
    n_items = len(rows[0])
    if n_items < 2:
        raise AnalysisError(f"need at least 2 items, got {n_items}")
    if any(len(row) != n_items for row in rows):
        raise AnalysisError("raters rated different numbers of items")
    m = len(rows)
    values = sorted({v for row in rows for v in row})
    index = {v: i for i, v in enumerate(values)}
    v = len(values)
    if v == 1:
        return 1.0
    # Coincidence matrix: within-item value pairs, each item contributing
    # its m*(m-1) ordered pairs weighted by 1/(m-1).
    coincidence = np.zeros((v, v))
    for item in range(n_items):
        counts = np.zeros(v)
        for row in rows:
            counts[index[row[item]]] += 1
        pair = np.outer(counts, counts) - np.diag(counts)
        coincidence += pair / (m - 1)
    margins = coincidence.sum(axis=1)
    n = margins.sum()
    observed = (coincidence.sum() - np.trace(coincidence)) / n
    expected = (n * n - (margins * margins).sum()) / (n * n)
    if expected == 0.0:
        return 1.0
    return float(1.0 - observed / expected)


def pairwise_agreement(predictions: Sequence[Sequence[int]], labels: Sequence[str]) -> np.ndarray:
    """K x K agreement matrix between per-expert prediction rows.

    The diagonal is exactly 1; the matrix is symmetric by construction.
    """
    if len(predictions) != len(labels):
        raise AnalysisError(f"{len(predictions)} prediction rows but {len(labels)} labels")
    if len(predictions) < 2:
        raise AnalysisError("need at least 2 experts")
    k = len(predictions)
    matrix = np.ones((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            alpha = krippendorff_alpha([predictions[i], predictions[j]])
            matrix[i, j] = matrix[j, i] = alpha
    return matrix


def expert_agreement(trained, texts: Sequence[str]) -> tuple[np.ndarray, tuple[str, ...]]:
    """Agreement between the domain experts of a trained bank model."""
    if trained.bank is None:
        raise AnalysisError(f"variant {trained.variant!r} has no expert bank")
    if not trained.bank.trained:
        raise AnalysisError("expert bank is untrained")
    predictions = trained.expert_predictions(texts)
    return pairwise_agreement(predictions, trained.bank.domains), trained.bank.domains


def write_agreement(
    out_dir: str | Path, matrix: np.ndarray, domains: Sequence[str], title: str
) -> dict[str, str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    svg_path = out / "agreement.svg"
    heatmap_svg(svg_path, matrix.tolist(), list(domains), title)
    return {"agreement_svg": str(svg_path)}


@dataclass
class ProjectionResult:
    coordinates: np.ndarray  # (n, 2)
    explained_variance: tuple[float, float]  # fractions of total variance
    split_labels: tuple[str, ...]
    components: np.ndarray  # (2, d), orthonormal rows


def pca_project(
    representations,
    sample_size: int | None = None,
    seed: int = 0,
    split_labels: Sequence[str] | None = None,
) -> ProjectionResult:
    """Project onto the top-2 principal components of the covariance matrix.

    With ``sample_size`` set, each split is subsampled to at most that many
    points (seeded) before fitting. Splits default to a single group.
    """
    reps = np.asarray(representations, dtype=np.float64)
    if reps.ndim != 2:
        raise AnalysisError(f"representations must be 2-D, got shape {reps.shape}")
    n, d = reps.shape
    if d < 2:
        raise AnalysisError(f"need representation width >= 2, got {d}")
    labels = tuple(split_labels) if split_labels is not None else ("all",) * n
    if len(labels) != n:
        raise AnalysisError(f"{n} rows but {len(labels)} split labels")
    if sample_size is not None:
        keep: list[int] = []
        for split in sorted(set(labels)):
            idx = [i for i, s in enumerate(labels) if s == split]
            if len(idx) > sample_size:
                idx = sorted(stable_rng("pca-sample", seed, split).sample(idx, sample_size))
            keep.extend(idx)
        keep.sort()
        reps = reps[keep]
        labels = tuple(labels[i] for i in keep)
        n = reps.shape[0]
    if n < 3:
        raise AnalysisError(f"need at least 3 points for a projection, got {n}")
    centered = reps - reps.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    components = eigvecs[:, order[:2]].T  # (2, d)
    total = float(eigvals.sum())
    fractions = (
        (float(eigvals[0]) / total, float(eigvals[1]) / total) if total > 0.0 else (0.0, 0.0)
    )
    return ProjectionResult(
        coordinates=centered @ components.T,
        explained_variance=fractions,
        split_labels=labels,
        components=components,
    )


def write_projection(out_dir: str | Path, result: ProjectionResult, title: str) -> dict[str, str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    svg_path = out / "projection.svg"
    scatter_svg(
        svg_path,
        result.coordinates.tolist(),
        list(result.split_labels),
        title,
        extra={"explained_variance": list(result.explained_variance)},
    )
    return {"projection_svg": str(svg_path)}
