"""
Scalar comparison metrics shared by run reports and the acceptance suites.
"""

from dataclasses import dataclass, asdict
from typing import Any, Dict

import numpy as np

from src.error_handler import LinalgError, ValidationError


@dataclass(frozen=True)
class SimilarityScore:
    """Cosine similarity times magnitude similarity of two flattened features."""

    cosine: float
    magnitude_ratio: float
    product: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def similarity(a, b) -> SimilarityScore:
    """
    Product of cosine similarity and magnitude similarity.

    Magnitude similarity is ``min(|a|, |b|) / max(|a|, |b|)``. Two all-zero
    inputs are identical and score 1.0; one zero input against a nonzero one
    scores 0.0.

    Args:
        a: Feature (any shape, flattened)
        b: Feature with the same number of elements

    Returns:
        SimilarityScore

    Raises:
        ValidationError: If the flattened lengths differ
    """
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValidationError(f"Length mismatch: {x.size} vs {y.size}",
                              {'len_a': x.size, 'len_b': y.size})

    na = float(np.linalg.norm(x))
    nb = float(np.linalg.norm(y))
    if na == 0.0 and nb == 0.0:
        return SimilarityScore(1.0, 1.0, 1.0)
    if na == 0.0 or nb == 0.0:
        return SimilarityScore(0.0, 0.0, 0.0)

    cosine = float(np.clip(np.dot(x, y) / (na * nb), -1.0, 1.0))
    ratio = min(na, nb) / max(na, nb)
    return SimilarityScore(cosine, ratio, cosine * ratio)


def energy_fraction(part, whole) -> float:
    """
    ``||part||_F^2 / ||whole||_F^2``.

    Raises:
        LinalgError: If whole has zero norm
    """
    p = np.asarray(part, dtype=np.float64)
    w = np.asarray(whole, dtype=np.float64)
    denom = float(np.vdot(w, w))
    if denom == 0.0:
        raise LinalgError("Energy fraction is undefined for a zero-norm whole")
    return float(np.vdot(p, p)) / denom


def run_summary(report) -> Dict[str, Any]:
    """
    Aggregate a RunReport into summary statistics.

    Errors and similarities are averaged over predicted steps only; a run
    without predicted steps reports zero error and unit similarity.

    Args:
        report: RunReport (anything exposing ``rows``, ``total_steps``,
            ``compute_count`` and ``predicted_count``)

    Returns:
        Dictionary with mean/max relative error, mean similarity, compute
        fraction and theoretical speedup T / |compute_steps|

    Raises:
        ValidationError: If the report has no rows
    """
    rows = list(report.rows)
    if not rows or report.total_steps < 1:
        raise ValidationError("Cannot summarize an empty report")

    predicted = [row for row in rows if not row.is_compute]
    errors = np.array([row.rel_error for row in predicted], dtype=np.float64)
    sims = np.array([row.similarity for row in predicted], dtype=np.float64)

    summary = {
        'total_steps': int(report.total_steps),
        'compute_count': int(report.compute_count),
        'predicted_count': int(report.predicted_count),
        'mean_rel_error': float(errors.mean()) if errors.size else 0.0,
        'max_rel_error': float(errors.max()) if errors.size else 0.0,
        'mean_similarity': float(sims.mean()) if sims.size else 1.0,
        'compute_fraction': report.compute_count / report.total_steps,
        'speedup': report.total_steps / report.compute_count,
    }
    final_error = getattr(report, 'final_latent_rel_error', None)
    if final_error is not None:
        summary['final_latent_rel_error'] = float(final_error)
    return summary
