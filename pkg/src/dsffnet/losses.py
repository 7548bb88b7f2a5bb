"""Training losses and evaluation metrics.

Losses operate on 3 x N :class:`Tensor` columns so they can be differentiated;
metrics take plain N x 3 arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .mesh import DegenerateMeshError, edge_lengths

DEFAULT_LAMBDA = 0.0005


@dataclass(frozen=True)
class LossBreakdown:
    l_rec: float
    l_edg: float
    lam: float
    total: float


@dataclass(frozen=True)
class MetricsRecord:
    pmd: float
    cd: float
    emd: float


def _cols(x) -> Tensor:
    t = ad.as_tensor(x)
    if t.data.ndim != 2 or t.shape[0] != 3:
        raise DimensionError(f"expected 3 x N vertex columns, got shape {t.shape}")
    return t


def loss_rec(pred, gt) -> Tensor:
    """Mean over vertices of the squared Euclidean distance."""
    pred, gt = _cols(pred), _cols(gt)
    if pred.shape[1] != gt.shape[1]:
        raise DimensionError(f"loss_rec: vertex axis 1 mismatch ({pred.shape[1]} vs {gt.shape[1]})")
    d = ad.sub(pred, gt)
    return ad.scale(ad.sum_all(ad.square(d)), 1.0 / pred.shape[1])


def loss_edge(pred, gt_vertices: np.ndarray, edges: np.ndarray) -> Tensor:
    """Mean over edges of ``|l_pred / l_gt - 1|``.

    ``gt_vertices`` is N x 3 (constant); ``edges`` is E x 2.
    """
    pred = _cols(pred)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) == 0:
        raise ContractError("loss_edge: no edges")
    l_gt = edge_lengths(np.asarray(gt_vertices), edges)
    if np.any(l_gt <= 0):
        raise DegenerateMeshError(f"loss_edge: {int(np.sum(l_gt <= 0))} zero-length ground-truth edges")
    d = ad.sub(ad.take_columns(pred, edges[:, 0]), ad.take_columns(pred, edges[:, 1]))
    l_pred = ad.sqrt(ad.sum_rows(ad.square(d)))
    ratio = ad.mul(l_pred, Tensor(1.0 / l_gt))
    return ad.mean_all(ad.absolute(ad.add_scalar(ratio, -1.0)))


def loss_total(pred, gt_vertices: np.ndarray, edges: np.ndarray,
               lam: float = DEFAULT_LAMBDA):
    """Returns ``(total_tensor, LossBreakdown)`` for ``L_rec + lam * L_edg``."""
    gt = Tensor(np.asarray(gt_vertices).T)
    rec = loss_rec(pred, gt)
    edg = loss_edge(pred, gt_vertices, edges)
    total = ad.add(rec, ad.scale(edg, lam))
    return total, LossBreakdown(float(rec.data), float(edg.data), float(lam), float(total.data))


# --------------------------------------------------------------------------
# metrics (N x 3 arrays)
# --------------------------------------------------------------------------

def _points(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise DimensionError(f"expected N x 3 points, got shape {a.shape}")
    return a


def pmd(pred, gt) -> float:
    """Point-wise mesh distance: mean squared distance of corresponding vertices."""
    pred, gt = _points(pred), _points(gt)
    if len(pred) != len(gt):
        raise DimensionError(f"pmd: vertex count mismatch ({len(pred)} vs {len(gt)})")
    d = pred - gt
    return float((d * d).sum(axis=1).mean())


def chamfer(a, b) -> float:
    """Mean squared nearest-neighbour distance, summed over both directions."""
    a, b = _points(a), _points(b)
    if len(a) == 0 or len(b) == 0:
        raise ContractError("chamfer: point sets must be nonempty")
    d2 = cdist(a, b, "sqeuclidean")
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def emd(a, b) -> float:
    """Exact earth mover's distance between equal-size sets (unsquared distances)."""
    a, b = _points(a), _points(b)
    if len(a) != len(b):
        raise ContractError(f"emd: sets must have equal size ({len(a)} vs {len(b)})")
    if len(a) == 0:
        raise ContractError("emd: point sets must be nonempty")
    cost = cdist(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / len(a))


def metrics(pred, gt) -> MetricsRecord:
    return MetricsRecord(pmd(pred, gt), chamfer(pred, gt), emd(pred, gt))
