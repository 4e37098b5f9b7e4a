"""Overlap and surface-distance metrics for label maps.

Distances are Euclidean, in pixels, between boundary pixels. HD95 is the
95th percentile (linear interpolation) of the pooled multiset of both
directed nearest-boundary distances; ASD is the mean of the same pool.
Classes are scored for foreground labels ``1..K-1``.

Degenerate classes: absent from both maps gives DSC = Jaccard = 1 and zero
distances; absent from exactly one gives DSC = Jaccard = 0 and both
distances equal to the image diagonal.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

HD_PERCENTILE = 95.0


@dataclass
class MetricsReport:
    classes: list[int]
    dsc: np.ndarray
    jaccard: np.ndarray
    hd95: np.ndarray
    asd: np.ndarray
    extra: dict = field(default_factory=dict)

    @property
    def mean_dsc(self) -> float:
        return float(np.mean(self.dsc))

    @property
    def mean_jaccard(self) -> float:
        return float(np.mean(self.jaccard))

    @property
    def mean_hd95(self) -> float:
        return float(np.mean(self.hd95))

    @property
    def mean_asd(self) -> float:
        return float(np.mean(self.asd))

    def rows(self, sample: str) -> list[list]:
        out = [
            [sample, c, float(d), float(j), float(h), float(a)]
            for c, d, j, h, a in zip(self.classes, self.dsc, self.jaccard, self.hd95, self.asd)
        ]
        out.append([sample, "mean", self.mean_dsc, self.mean_jaccard, self.mean_hd95, self.mean_asd])
        return out


def extract_boundary(mask: np.ndarray, class_id: int) -> np.ndarray:
    """Boolean map of class pixels with a 4-neighbour of another class or off-frame."""
    m = np.asarray(mask) == class_id
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    tree = cKDTree(dst)
    d, _ = tree.query(src, k=1)
    return np.asarray(d, dtype=np.float64)


def surface_distances(pred: np.ndarray, gt: np.ndarray, class_id: int) -> np.ndarray:
    """Pooled nearest-boundary distances in both directions."""
    bp = np.argwhere(extract_boundary(pred, class_id)).astype(np.float64)
    bg = np.argwhere(extract_boundary(gt, class_id)).astype(np.float64)
    return np.concatenate([_directed(bp, bg), _directed(bg, bp)])


def compute_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int | None = None) -> MetricsReport:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if num_classes is None:
        num_classes = int(max(pred.max(initial=0), gt.max(initial=0))) + 1
    diag = float(np.hypot(*pred.shape))
    classes = list(range(1, num_classes))
    dsc, jac, hd, asd = [], [], [], []
    for c in classes:
        p = pred == c
        g = gt == c
        ps, gs = int(p.sum()), int(g.sum())
        if ps == 0 and gs == 0:
            dsc.append(1.0), jac.append(1.0), hd.append(0.0), asd.append(0.0)
            continue
        if ps == 0 or gs == 0:
            dsc.append(0.0), jac.append(0.0), hd.append(diag), asd.append(diag)
            continue
        inter = int((p & g).sum())
        dsc.append(2.0 * inter / (ps + gs))
        jac.append(inter / (ps + gs - inter))
        d = surface_distances(pred, gt, c)
        hd.append(float(np.percentile(d, HD_PERCENTILE)))
        asd.append(float(d.mean()))
    return MetricsReport(classes, np.array(dsc), np.array(jac), np.array(hd), np.array(asd))


def aggregate(reports: list[MetricsReport]) -> dict[str, float]:
    if not reports:
        return {"dsc": float("nan"), "jaccard": float("nan"), "hd95": float("nan"), "asd": float("nan")}
    return {
        "dsc": float(np.mean([r.mean_dsc for r in reports])),
        "jaccard": float(np.mean([r.mean_jaccard for r in reports])),
        "hd95": float(np.mean([r.mean_hd95 for r in reports])),
        "asd": float(np.mean([r.mean_asd for r in reports])),
    }
