"""Desk-scale evaluation: diagonal-Gaussian Fréchet gap, a frozen cosine
alignment score between generated latents and their caption embeddings, and
Pareto reporting over configuration grids.

The Fréchet number here fits diagonal Gaussians, so it mirrors the role of a
distribution-gap metric (lower = closer) without the matrix square root; it
is an analogue, never comparable to published FID values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from miniflow.supervision import TeacherEmbedding
from miniflow.tensor import ShapeError


@dataclass(frozen=True)
class GaussianFit:
    """Per-dimension sample mean and unbiased variance."""

    mean: np.ndarray
    var: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise ValueError(f"a Gaussian fit needs at least 2 samples, got {self.count}")
        if np.any(self.var < 0):
            raise ValueError("negative variance in Gaussian fit")


def fit_gaussian(features: np.ndarray) -> GaussianFit:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ValueError(f"fit_gaussian expects [N>=2, e] features, got {features.shape}")
    return GaussianFit(mean=features.mean(axis=0),
                       var=features.var(axis=0, ddof=1),
                       count=features.shape[0])


def frechet_distance(a: GaussianFit, b: GaussianFit) -> float:
    """Closed form for diagonal Gaussians: sum (mu gap)^2 + (sigma gap)^2."""
    if a.mean.shape != b.mean.shape:
        raise ShapeError(f"width mismatch: {a.mean.shape} vs {b.mean.shape}")
    dm = a.mean - b.mean
    ds = np.sqrt(a.var) - np.sqrt(b.var)
    return float(np.sum(dm * dm) + np.sum(ds * ds))


# ---------------------------------------------------------------------------
# alignment score


def build_scoring_map(prototypes: Mapping[int, np.ndarray],
                      teacher_map: Mapping[int, TeacherEmbedding]) -> np.ndarray:
    """Frozen linear map W [e, D] from flattened latents to teacher space.

    Solved once (least squares) so each class prototype lands on its pooled
    caption embedding: the image-side counterpart of the text teacher, fixed
    before any training run and shared by all of them.
    """
    ids = sorted(prototypes)
    if sorted(teacher_map) != ids and not set(ids) <= set(teacher_map):
        missing = sorted(set(ids) - set(teacher_map))
        raise KeyError(f"captions missing from teacher map: {missing}")
    m = np.stack([np.asarray(prototypes[i], dtype=np.float64).reshape(-1) for i in ids], axis=1)
    t = np.stack([teacher_map[i].pooled() for i in ids], axis=1)
    w = t @ np.linalg.pinv(m)
    w.setflags(write=False)
    return w


def score_features(latents: np.ndarray, scoring_map: np.ndarray) -> np.ndarray:
    """[N, C, H, W] latents -> [N, e] frozen features."""
    flat = np.asarray(latents, dtype=np.float64).reshape(len(latents), -1)
    return flat @ scoring_map.T


def alignment_score(teacher_map: Mapping[int, TeacherEmbedding],
                    latents: np.ndarray,
                    caption_ids: Sequence[int],
                    scoring_map: np.ndarray) -> float:
    """Mean cosine between each scored latent and its caption's pooled
    teacher vector; in [-1, 1]."""
    if len(latents) != len(caption_ids):
        raise ValueError(f"{len(latents)} latents vs {len(caption_ids)} caption ids")
    feats = score_features(latents, scoring_map)
    cosines = []
    for f, cid in zip(feats, caption_ids):
        if cid not in teacher_map:
            raise KeyError(f"caption id {cid} missing from teacher map")
        n = np.linalg.norm(f)
        if n == 0:
            cosines.append(0.0)
            continue
        cosines.append(float((f / n) @ teacher_map[cid].pooled()))
    return float(np.mean(cosines))


# ---------------------------------------------------------------------------
# Pareto reporting


@dataclass(frozen=True)
class ParetoRow:
    label: str
    frechet: float
    alignment: float
    non_dominated: bool


@dataclass(frozen=True)
class ParetoReport:
    rows: tuple[ParetoRow, ...]

    COLUMNS = ("config", "frechet_gap", "alignment_score", "non_dominated")

    def to_text(self) -> str:
        widths = [max(len(self.COLUMNS[0]), *(len(r.label) for r in self.rows)), 14, 17, 13]
        header = (f"{self.COLUMNS[0]:<{widths[0]}}  {self.COLUMNS[1]:>{widths[1]}}  "
                  f"{self.COLUMNS[2]:>{widths[2]}}  {self.COLUMNS[3]:>{widths[3]}}")
        lines = [header, "-" * len(header)]
        for r in self.rows:
            flag = "*" if r.non_dominated else ""
            lines.append(f"{r.label:<{widths[0]}}  {r.frechet:>{widths[1]}.6f}  "
                         f"{r.alignment:>{widths[2]}.6f}  {flag:>{widths[3]}}")
        lines.append("(* = on the frontier: no config is at least as good on both axes and better on one)")
        return "\n".join(lines) + "\n"

    def to_delimited(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for r in self.rows:
            lines.append(f"{r.label},{r.frechet!r},{r.alignment!r},{int(r.non_dominated)}")
        return "\n".join(lines) + "\n"


def pareto_report(results: Sequence[tuple[str, float, float]]) -> ParetoReport:
    """Flag non-dominated configs on (frechet down, alignment up).

    ``results`` holds (label, frechet_gap, alignment_score) triples; output
    rows are sorted by (frechet asc, alignment desc, label) so reports are
    deterministic.
    """
    if not results:
        raise ValueError("pareto_report needs at least one result")

    def dominated(i):
        fi, ai = results[i][1], results[i][2]
        for j, (_, fj, aj) in enumerate(results):
            if j == i:
                continue
            if fj <= fi and aj >= ai and (fj < fi or aj > ai):
                return True
        return False

    rows = [ParetoRow(label=lab, frechet=f, alignment=a, non_dominated=not dominated(i))
            for i, (lab, f, a) in enumerate(results)]
    rows.sort(key=lambda r: (r.frechet, -r.alignment, r.label))
    return ParetoReport(rows=tuple(rows))
