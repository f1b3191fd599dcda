"""Retrieval evaluation: cosine similarity grid, rank-1, ROC and VR@FAR.

Evaluation consumes extractor features only. Scoring convention: a pair is
accepted at threshold t when its similarity is >= t. Thresholds sweep the
distinct observed scores (descending), preceded by a sentinel above every
score, so the curve starts at (FAR, TPR) = (0, 0) and ends at (1, 1). VR@FAR
uses a step rule (no interpolation): the best TPR among thresholds whose FAR
does not exceed the level.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SimilarityMatrix",
    "RocCurve",
    "EvalReport",
    "DEFAULT_FAR_LEVELS",
    "cosine_similarity",
    "build_similarity",
    "rank1",
    "roc_and_vr",
    "evaluate",
    "pair_distance_auc",
    "write_metrics_csv",
    "write_roc_csv",
]

DEFAULT_FAR_LEVELS = (0.01, 0.001)


@dataclass
class SimilarityMatrix:
    scores: np.ndarray          # (n_probe, n_gallery), entries in [-1, 1]
    probe_labels: np.ndarray
    gallery_labels: np.ndarray

    def __post_init__(self):
        if self.scores.shape != (len(self.probe_labels), len(self.gallery_labels)):
            raise ValueError("label arrays must match the score grid")


@dataclass
class RocCurve:
    """Operating points ordered by decreasing threshold (so FAR ascends)."""

    thresholds: np.ndarray
    far: np.ndarray
    tpr: np.ndarray


@dataclass
class EvalReport:
    rank1: float
    vr_at_far: dict[float, float]
    roc: RocCurve


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"need two vectors of equal length, got {a.shape}, {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm input")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def build_similarity(
    probe_features: np.ndarray,
    gallery_features: np.ndarray,
    probe_labels: np.ndarray,
    gallery_labels: np.ndarray,
) -> SimilarityMatrix:
    """Dense cosine grid of every probe row against every gallery row."""
    p = np.asarray(probe_features, dtype=np.float64)
    g = np.asarray(gallery_features, dtype=np.float64)
    if p.ndim != 2 or g.ndim != 2 or p.shape[0] == 0 or g.shape[0] == 0:
        raise ValueError("probe and gallery must be non-empty feature matrices")
    if p.shape[1] != g.shape[1]:
        raise ValueError(f"feature dims differ: {p.shape[1]} vs {g.shape[1]}")
    for name, feats in (("probe", p), ("gallery", g)):
        norms = np.linalg.norm(feats, axis=1)
        bad = np.nonzero(norms == 0.0)[0]
        if len(bad):
            raise ValueError(f"zero-norm {name} feature at row {bad[0]}")
    pn = p / np.linalg.norm(p, axis=1, keepdims=True)
    gn = g / np.linalg.norm(g, axis=1, keepdims=True)
    scores = np.clip(pn @ gn.T, -1.0, 1.0)
    return SimilarityMatrix(
        scores=scores,
        probe_labels=np.asarray(probe_labels, dtype=np.int64),
        gallery_labels=np.asarray(gallery_labels, dtype=np.int64),
    )


def rank1(sim: SimilarityMatrix) -> float:
    """Fraction of probes whose top-scoring gallery entry matches.

    Ties resolve to the lowest gallery index.
    """
    missing = np.setdiff1d(sim.probe_labels, sim.gallery_labels)
    if len(missing):
        raise ValueError(f"probe label {missing[0]} absent from the gallery")
    top = np.argmax(sim.scores, axis=1)
    return float((sim.gallery_labels[top] == sim.probe_labels).mean())


def roc_and_vr(
    sim: SimilarityMatrix,
    far_levels: tuple[float, ...] = DEFAULT_FAR_LEVELS,
) -> tuple[RocCurve, dict[float, float]]:
    """Verification metrics over the genuine/impostor score pools."""
    genuine_mask = sim.probe_labels[:, None] == sim.gallery_labels[None, :]
    genuine = np.sort(sim.scores[genuine_mask])
    impostor = np.sort(sim.scores[~genuine_mask])
    if len(genuine) == 0 or len(impostor) == 0:
        raise ValueError("need both genuine and impostor pairs in the grid")

    thresholds = np.unique(sim.scores)[::-1]  # descending
    # accepted(t) = #scores >= t, via positions in the ascending sorted pools
    tpr = 1.0 - np.searchsorted(genuine, thresholds, side="left") / len(genuine)
    far = 1.0 - np.searchsorted(impostor, thresholds, side="left") / len(impostor)
    thresholds = np.concatenate([[np.inf], thresholds])
    far = np.concatenate([[0.0], far])
    tpr = np.concatenate([[0.0], tpr])
    curve = RocCurve(thresholds=thresholds, far=far, tpr=tpr)

    vr = {}
    for level in far_levels:
        ok = far <= level
        vr[float(level)] = float(tpr[ok].max()) if ok.any() else 0.0
    return curve, vr


def evaluate(
    probe_features: np.ndarray,
    gallery_features: np.ndarray,
    probe_labels: np.ndarray,
    gallery_labels: np.ndarray,
    far_levels: tuple[float, ...] = DEFAULT_FAR_LEVELS,
) -> EvalReport:
    sim = build_similarity(probe_features, gallery_features, probe_labels, gallery_labels)
    curve, vr = roc_and_vr(sim, far_levels)
    return EvalReport(rank1=rank1(sim), vr_at_far=vr, roc=curve)


def pair_distance_auc(same: np.ndarray, different: np.ndarray) -> float:
    """AUC of 'smaller distance means same identity' over two pools.

    Equals P(d_same < d_diff) + 0.5 P(d_same = d_diff) (Mann-Whitney form).
    """
    same = np.asarray(same, dtype=np.float64)
    different = np.sort(np.asarray(different, dtype=np.float64))
    if len(same) == 0 or len(different) == 0:
        raise ValueError("both pools must be non-empty")
    lo = np.searchsorted(different, same, side="left")
    hi = np.searchsorted(different, same, side="right")
    wins = (len(different) - hi) + 0.5 * (hi - lo)
    return float(wins.mean() / len(different))


def _fmt(x: float) -> str:
    return repr(float(x))


def write_metrics_csv(path, report: EvalReport) -> None:
    """Scalar metrics as 'metric,value' rows (rank1 first, then vr levels)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["rank1", _fmt(report.rank1)])
        for level, tpr in report.vr_at_far.items():
            writer.writerow([f"vr_at_far_{_fmt(level)}", _fmt(tpr)])


def write_roc_csv(path, roc: RocCurve) -> None:
    """ROC points as 'threshold,far,tpr' rows, FAR ascending."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "far", "tpr"])
        for t, f, r in zip(roc.thresholds, roc.far, roc.tpr):
            writer.writerow([_fmt(t), _fmt(f), _fmt(r)])
