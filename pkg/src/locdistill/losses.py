"""Training and distillation losses, each with its analytic gradient.

Every operation returns a :class:`LossResult` holding the loss value and the
gradient with respect to the student quantity it differentiates (logits, box
corners, or feature entries). Gradients are exact closed forms and are pinned
against central finite differences by the test suite.

Conventions:

* Cross-entropy ``H(p, g) = -sum_i g_i ln p_i`` weights the student's
  log-probabilities by the target distribution ``g``.
* Distillation losses report the cross-entropy as their canonical ``value``
  and the KL divergence (teacher entropy subtracted) as the ``kl``
  diagnostic; both have the same gradient ``(p_tau - q_tau) / tau``.
* Box edges are ordered ``(t, b, l, r)``: distances from a sample point to
  the top, bottom, left, and right sides.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxdist import BinGrid, BoxDistribution, TwoHotTarget, PROB_SUM_TOL
from .geometry import BoundingBox
from .regions import RegionMasks

__all__ = [
    "LossResult",
    "DistillConfig",
    "SceneOutputs",
    "SceneTruth",
    "ce_loss",
    "kd_loss",
    "ld_edge_loss",
    "ld_box_loss",
    "dfl_loss",
    "tbr_loss",
    "giou_regression_loss",
    "feature_imitation_loss",
    "total_loss",
    "scene_tbr_loss",
    "split_scene_grad",
]

# Order of the per-edge distances throughout the package.
EDGE_ORDER = ("t", "b", "l", "r")


@dataclass(frozen=True)
class LossResult:
    """A loss value and its gradient w.r.t. the differentiated student parameter.

    ``grad`` matches the parameter's shape: logit-space losses return a
    vector per logit, box losses a length-4 vector over ``(x1, y1, x2, y2)``,
    feature imitation the feature-matrix shape, and scene-level losses the
    flat layout documented in :func:`total_loss`.
    """

    value: float
    grad: np.ndarray
    kl: float | None = None
    components: dict[str, float] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "value", float(self.value))
        g = np.asarray(self.grad, dtype=np.float64)
        if not np.isfinite(self.value):
            raise ValueError(f"loss value must be finite, got {self.value!r}")
        if not np.all(np.isfinite(g)):
            raise ValueError("loss gradient must be finite")
        object.__setattr__(self, "grad", g)


@dataclass(frozen=True)
class DistillConfig:
    """All scalars the distillation pipeline needs.

    The four distillation weights default to the tied scheme: LD terms
    follow the regression weight, KD terms follow the classification
    weight. Pass explicit values (including 0) to override.
    """

    grid: BinGrid
    tau: float = 10.0
    gamma_vlr: float = 0.25
    alpha_pos: float = 0.5
    w_cls: float = 1.0
    w_reg: float = 1.0
    w_dfl: float = 1.0
    w_ld_main: float | None = None
    w_ld_vlr: float | None = None
    w_kd_main: float | None = None
    w_kd_vlr: float | None = None
    tbr_margin: float = 0.1

    def __post_init__(self) -> None:
        if self.tau <= 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not (0.0 <= self.gamma_vlr <= 1.0):
            raise ValueError(f"gamma_vlr must lie in [0, 1], got {self.gamma_vlr}")
        if not (0.0 < self.alpha_pos <= 1.0):
            raise ValueError(f"alpha_pos must lie in (0, 1], got {self.alpha_pos}")
        if self.tbr_margin < 0.0:
            raise ValueError(f"tbr_margin must be nonnegative, got {self.tbr_margin}")
        ties = {"w_ld_main": self.w_reg, "w_ld_vlr": self.w_reg,
                "w_kd_main": self.w_cls, "w_kd_vlr": self.w_cls}
        for name, tied in ties.items():
            if getattr(self, name) is None:
                object.__setattr__(self, name, float(tied))
        for name in ("w_cls", "w_reg", "w_dfl", "w_ld_main", "w_ld_vlr",
                     "w_kd_main", "w_kd_vlr"):
            v = float(getattr(self, name))
            if v < 0.0 or not np.isfinite(v):
                raise ValueError(f"{name} must be a nonnegative finite weight, got {v}")
            object.__setattr__(self, name, v)

    @property
    def distills(self) -> bool:
        return (self.w_ld_main > 0 or self.w_ld_vlr > 0
                or self.w_kd_main > 0 or self.w_kd_vlr > 0)


# ---------------------------------------------------------------------------
# softmax helpers (batched over the last axis)
# ---------------------------------------------------------------------------

def _log_softmax(z: np.ndarray, tau: float) -> np.ndarray:
    zt = np.asarray(z, dtype=np.float64) / tau
    zt = zt - zt.max(axis=-1, keepdims=True)
    return zt - np.log(np.exp(zt).sum(axis=-1, keepdims=True))


def _check_vector(z, name: str) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError(f"{name} must be a 1-D vector, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError(f"{name} must be finite")
    return z


# ---------------------------------------------------------------------------
# logit-space losses
# ---------------------------------------------------------------------------

def ce_loss(logits, target_weights, tau: float = 1.0) -> LossResult:
    """Cross-entropy against target weights (one-hot or two-hot).

    ``value = -sum_i g_i ln p_i`` with ``p = softmax(z / tau)``;
    ``grad = (p - g) / tau``, the plain ``p - g`` at ``tau = 1``.
    """
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = _check_vector(logits, "logits")
    g = _check_vector(target_weights, "target weights")
    if z.shape != g.shape:
        raise ValueError(f"logits {z.shape} and target weights {g.shape} differ in length")
    if np.any(g < 0.0) or abs(g.sum() - 1.0) > PROB_SUM_TOL:
        raise ValueError("target weights must be nonnegative and sum to 1")
    ls = _log_softmax(z, tau)
    value = -float(np.dot(g, ls))
    grad = (np.exp(ls) - g) / tau
    return LossResult(value=value, grad=grad)


def kd_loss(student_logits, teacher_logits, tau: float) -> LossResult:
    """Distillation loss between tempered student and teacher distributions.

    ``value`` is the cross-entropy of the student's tempered log-probabilities
    under the teacher's tempered probabilities; ``kl`` subtracts the teacher
    entropy so a perfectly matched student scores exactly 0. The gradient for
    either variant is ``(p_tau - q_tau) / tau``.
    """
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    zs = _check_vector(student_logits, "student logits")
    zt = _check_vector(teacher_logits, "teacher logits")
    if zs.shape != zt.shape:
        raise ValueError(f"student {zs.shape} and teacher {zt.shape} logit lengths differ")
    ls = _log_softmax(zs, tau)
    lt = _log_softmax(zt, tau)
    q = np.exp(lt)
    value = -float(np.dot(q, ls))
    kl = float(np.dot(q, lt - ls))
    grad = (np.exp(ls) - q) / tau
    return LossResult(value=value, grad=grad, kl=kl)


def ld_edge_loss(student_logits, teacher_logits, tau: float) -> LossResult:
    """Localization distillation for a single edge's logits.

    Identical contract to :func:`kd_loss` applied to the ``n + 1`` logits of
    one edge distribution; shares the same code path.
    """
    return kd_loss(student_logits, teacher_logits, tau)


def ld_box_loss(student: BoxDistribution, teacher: BoxDistribution, tau: float) -> LossResult:
    """Localization distillation summed over all edges of a box.

    Student and teacher must have the same number of edges (4 vs 5 is an
    error) and identical grids edge by edge; the gradient is the
    concatenation of the per-edge gradients.
    """
    if len(student) != len(teacher):
        raise ValueError(
            f"edge count mismatch: student has {len(student)}, teacher has {len(teacher)}"
        )
    for k, (es, et) in enumerate(zip(student.edges, teacher.edges)):
        if es.grid != et.grid:
            raise ValueError(
                f"edge {k}: student grid {es.grid} differs from teacher grid {et.grid}; "
                "distillation requires identical bin grids"
            )
    parts = [ld_edge_loss(es.logits, et.logits, tau)
             for es, et in zip(student.edges, teacher.edges)]
    return LossResult(
        value=sum(p.value for p in parts),
        grad=np.concatenate([p.grad for p in parts]),
        kl=sum(p.kl for p in parts),
    )


def dfl_loss(logits, target: TwoHotTarget) -> LossResult:
    """Distribution focal loss for one edge: a two-hot weighted cross-entropy.

    ``value = u1 * H(p, g_i) + u2 * H(p, g_(i+1))``; the gradient is
    ``p_k - u1*[k = i] - u2*[k = i+1]`` (so ``p_i - u1`` at the left index).
    """
    z = _check_vector(logits, "logits")
    g = target.as_weights(z.shape[0])
    return ce_loss(z, g, tau=1.0)


# ---------------------------------------------------------------------------
# box-space losses
# ---------------------------------------------------------------------------

def _giou_batch(boxes_s: np.ndarray, boxes_g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized GIoU and its gradient w.r.t. the first argument's corners.

    Inputs are ``(K, 4)`` arrays of ``(x1, y1, x2, y2)``. Returns
    ``(giou (K,), dgiou/ds (K, 4))``. Non-smooth corner-alignment points
    take the one-sided subgradient.
    """
    s = np.asarray(boxes_s, dtype=np.float64)
    g = np.asarray(boxes_g, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != 4 or s.shape != g.shape:
        raise ValueError(f"expected matching (K, 4) box arrays, got {s.shape} and {g.shape}")
    sx1, sy1, sx2, sy2 = s.T
    gx1, gy1, gx2, gy2 = g.T

    iw = np.minimum(sx2, gx2) - np.maximum(sx1, gx1)
    ih = np.minimum(sy2, gy2) - np.maximum(sy1, gy1)
    overlap = (iw > 0.0) & (ih > 0.0)
    inter = np.where(overlap, iw * ih, 0.0)

    area_s = (sx2 - sx1) * (sy2 - sy1)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_s + area_g - inter

    cw = np.maximum(sx2, gx2) - np.minimum(sx1, gx1)
    ch = np.maximum(sy2, gy2) - np.minimum(sy1, gy1)
    enclosing = cw * ch
    if np.any(enclosing <= 0.0):
        raise ValueError("giou undefined: an enclosing box has zero area")
    if np.any(union <= 0.0):
        raise ValueError("giou undefined: a box pair has zero union area")

    giou = inter / union - (enclosing - union) / enclosing

    d_inter = np.zeros_like(s)
    live_ih = np.where(overlap, ih, 0.0)
    live_iw = np.where(overlap, iw, 0.0)
    d_inter[:, 0] = np.where(sx1 > gx1, -live_ih, 0.0)
    d_inter[:, 2] = np.where(sx2 < gx2, live_ih, 0.0)
    d_inter[:, 1] = np.where(sy1 > gy1, -live_iw, 0.0)
    d_inter[:, 3] = np.where(sy2 < gy2, live_iw, 0.0)

    d_area = np.stack([-(sy2 - sy1), -(sx2 - sx1), sy2 - sy1, sx2 - sx1], axis=1)
    d_union = d_area - d_inter

    d_enc = np.zeros_like(s)
    d_enc[:, 0] = np.where(sx1 < gx1, -ch, 0.0)
    d_enc[:, 2] = np.where(sx2 > gx2, ch, 0.0)
    d_enc[:, 1] = np.where(sy1 < gy1, -cw, 0.0)
    d_enc[:, 3] = np.where(sy2 > gy2, cw, 0.0)

    u = union[:, None]
    c = enclosing[:, None]
    d_giou = (d_inter * u - inter[:, None] * d_union) / (u * u)
    d_giou += (d_union * c - u * d_enc) / (c * c)
    return giou, d_giou


def giou_regression_loss(student_box: BoundingBox, gt_box: BoundingBox) -> LossResult:
    """Box regression loss ``1 - GIoU`` with gradient over the 4 student corners."""
    vals, grads = _giou_batch(
        np.asarray([student_box.to_list()]), np.asarray([gt_box.to_list()])
    )
    return LossResult(value=1.0 - float(vals[0]), grad=-grads[0])


def _corner_l2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a - b) ** 2).sum(axis=-1))


def tbr_loss(
    student_box: BoundingBox,
    teacher_box: BoundingBox,
    gt_box: BoundingBox,
    margin: float,
) -> LossResult:
    """Teacher-bounded regression: regress toward the ground truth only when
    the student is worse than the teacher by more than ``margin``.

    The gate compares corner-coordinate L2 distances to the ground truth;
    when active the loss is ``1 - GIoU(student, gt)``, otherwise the result
    is exactly zero with a zero gradient.
    """
    if margin < 0.0:
        raise ValueError(f"margin must be nonnegative, got {margin}")
    s = np.asarray(student_box.to_list())
    t = np.asarray(teacher_box.to_list())
    g = np.asarray(gt_box.to_list())
    if _corner_l2(s, g) + margin > _corner_l2(t, g):
        return giou_regression_loss(student_box, gt_box)
    return LossResult(value=0.0, grad=np.zeros(4))


def feature_imitation_loss(student_feats, teacher_feats, region) -> LossResult:
    """Mean per-location L2 distance between feature matrices over a region.

    ``student_feats`` and ``teacher_feats`` are ``(L, D)`` arrays of equal
    shape; ``region`` is a boolean mask over the ``L`` locations. The
    gradient w.r.t. the student features is zero outside the region.
    """
    ms = np.asarray(student_feats, dtype=np.float64)
    mt = np.asarray(teacher_feats, dtype=np.float64)
    if ms.shape != mt.shape:
        raise ValueError(f"feature shapes differ: {ms.shape} vs {mt.shape}")
    if ms.ndim != 2:
        raise ValueError(f"features must be (locations, dims) matrices, got {ms.shape}")
    mask = np.asarray(region, dtype=bool)
    if mask.shape != (ms.shape[0],):
        raise ValueError(f"region mask shape {mask.shape} does not match {ms.shape[0]} locations")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("imitation region is empty")
    diff = ms[mask] - mt[mask]
    norms = np.sqrt((diff * diff).sum(axis=1))
    value = float(norms.mean())
    grad = np.zeros_like(ms)
    # Subgradient 0 where a location matches exactly (norm not differentiable at 0).
    safe = norms > 0.0
    rows = np.flatnonzero(mask)[safe]
    grad[rows] = diff[safe] / (norms[safe, None] * count)
    return LossResult(value=value, grad=grad)


# ---------------------------------------------------------------------------
# scene-level composition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneOutputs:
    """One model's head outputs for every anchor of a scene."""

    cls_logits: np.ndarray   # (A, C)
    edge_logits: np.ndarray  # (A, E, m)

    def __post_init__(self) -> None:
        cls_logits = np.asarray(self.cls_logits, dtype=np.float64)
        edge_logits = np.asarray(self.edge_logits, dtype=np.float64)
        if cls_logits.ndim != 2:
            raise ValueError(f"cls_logits must be (anchors, classes), got {cls_logits.shape}")
        if edge_logits.ndim != 3:
            raise ValueError(f"edge_logits must be (anchors, edges, bins), got {edge_logits.shape}")
        if cls_logits.shape[0] != edge_logits.shape[0]:
            raise ValueError("cls_logits and edge_logits disagree on the anchor count")
        if not (np.all(np.isfinite(cls_logits)) and np.all(np.isfinite(edge_logits))):
            raise ValueError("scene logits must be finite")
        object.__setattr__(self, "cls_logits", cls_logits)
        object.__setattr__(self, "edge_logits", edge_logits)

    @property
    def n_anchors(self) -> int:
        return self.cls_logits.shape[0]


@dataclass(frozen=True)
class SceneTruth:
    """Ground truth for a scene: labels, observed edge targets, sample points.

    ``edge_targets`` rows are only read for main-positive anchors; other rows
    may hold arbitrary placeholders.
    """

    labels: np.ndarray        # (A,)
    edge_targets: np.ndarray  # (A, E)
    points: np.ndarray | None = None  # (A, 2); defaults to the origin

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels, dtype=np.int64)
        targets = np.asarray(self.edge_targets, dtype=np.float64)
        if labels.ndim != 1 or targets.ndim != 2 or labels.shape[0] != targets.shape[0]:
            raise ValueError("labels must be (A,) and edge_targets (A, E)")
        points = self.points
        if points is None:
            points = np.zeros((labels.shape[0], 2))
        points = np.asarray(points, dtype=np.float64)
        if points.shape != (labels.shape[0], 2):
            raise ValueError(f"points must be (A, 2), got {points.shape}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "edge_targets", targets)
        object.__setattr__(self, "points", points)


def split_scene_grad(grad: np.ndarray, n_anchors: int, n_classes: int,
                     n_edges: int, n_bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Split a flat scene gradient into ``(A, C)`` cls and ``(A, E, m)`` edge blocks."""
    n_cls = n_anchors * n_classes
    expected = n_cls + n_anchors * n_edges * n_bins
    if grad.shape != (expected,):
        raise ValueError(f"flat gradient has shape {grad.shape}, expected ({expected},)")
    return (grad[:n_cls].reshape(n_anchors, n_classes),
            grad[n_cls:].reshape(n_anchors, n_edges, n_bins))


def _encode_targets_batch(y: np.ndarray, grid: BinGrid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized two-hot encoding matching :func:`boxdist.encode_target`."""
    if np.any(y < grid.e_min) or np.any(y > grid.e_max):
        raise ValueError(
            f"edge target outside regression range [{grid.e_min}, {grid.e_max}]"
        )
    idx = np.floor((y - grid.e_min) / grid.delta).astype(np.int64)
    idx = np.minimum(idx, grid.n - 1)
    u2 = np.clip((y - grid.endpoints[idx]) / grid.delta, 0.0, 1.0)
    return idx, 1.0 - u2, u2


def _boxes_from_edges(points: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """(K, 4) corner boxes from sample points and (t, b, l, r) distances."""
    px, py = points[:, 0], points[:, 1]
    t, b, l, r = edges.T
    return np.stack([px - l, py - t, px + r, py + b], axis=1)


def _box_grad_to_edges(g_box: np.ndarray) -> np.ndarray:
    """Map a corner gradient (x1, y1, x2, y2) to an edge gradient (t, b, l, r)."""
    return np.stack([-g_box[:, 1], g_box[:, 3], -g_box[:, 0], g_box[:, 2]], axis=1)


def _tempered_kl_block(z_s: np.ndarray, z_t: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """Mean-per-anchor tempered KL and its gradient w.r.t. the student logits.

    ``z_s``/``z_t`` have shape ``(K, ...)`` with logits on the last axis; the
    KL is summed over all non-anchor axes and averaged over the K anchors.
    """
    k = z_s.shape[0]
    ls = _log_softmax(z_s, tau)
    lt = _log_softmax(z_t, tau)
    q = np.exp(lt)
    value = float((q * (lt - ls)).sum() / k)
    grad = (np.exp(ls) - q) / (tau * k)
    return value, grad


def _expectation_chain(p: np.ndarray, endpoints: np.ndarray, g_edge_vals: np.ndarray) -> np.ndarray:
    """Chain an edge-value gradient through the softmax expectation decode.

    ``p`` is ``(K, E, m)`` probabilities, ``g_edge_vals`` is ``(K, E)``;
    returns the ``(K, E, m)`` gradient w.r.t. the edge logits.
    """
    yhat = p @ endpoints
    return g_edge_vals[:, :, None] * p * (endpoints[None, None, :] - yhat[:, :, None])


def total_loss(
    student: SceneOutputs,
    teacher: SceneOutputs | None,
    truth: SceneTruth,
    masks: RegionMasks,
    cfg: DistillConfig,
) -> LossResult:
    """Composite per-scene objective with selective region distillation.

    ``value = w_cls*L_cls + w_reg*L_reg + w_dfl*L_DFL
    + w_ld_main*LD(main) + w_ld_vlr*LD(vlr)
    + w_kd_main*KD(main) + w_kd_vlr*KD(vlr)``.

    Supervised terms: classification cross-entropy averaged over all
    anchors; ``1 - GIoU`` regression and DFL averaged over main positives.
    Each distillation term is averaged over its own mask and enters the
    value as the KL diagnostic, so a student matching its teacher
    contributes exactly zero.

    The gradient is flat: the ``(A, C)`` classification block (C-order)
    followed by the ``(A, E, m)`` edge block; see :func:`split_scene_grad`.
    """
    a, n_classes = student.cls_logits.shape
    _, n_edges, n_bins = student.edge_logits.shape
    if n_bins != cfg.grid.size:
        raise ValueError(
            f"edge logits carry {n_bins} bins but the grid has {cfg.grid.size} endpoints"
        )
    if truth.labels.shape[0] != a or len(masks) != a:
        raise ValueError("scene outputs, truth, and masks disagree on the anchor count")
    if truth.edge_targets.shape[1] != n_edges:
        raise ValueError("truth edge count does not match the edge logits")
    if np.any(truth.labels < 0) or np.any(truth.labels >= n_classes):
        raise ValueError("class labels out of range")
    if cfg.distills:
        if teacher is None:
            raise ValueError("distillation weights are active but no teacher outputs given")
        if (teacher.cls_logits.shape != student.cls_logits.shape
                or teacher.edge_logits.shape != student.edge_logits.shape):
            raise ValueError("teacher and student scene outputs must have identical shapes")
    if cfg.w_reg > 0.0 and cfg.grid.e_min < 0.0:
        raise ValueError(
            "the box regression term needs nonnegative edge distances (grid.e_min >= 0)"
        )

    grad_cls = np.zeros_like(student.cls_logits)
    grad_edges = np.zeros_like(student.edge_logits)
    endpoints = cfg.grid.endpoints

    # Classification cross-entropy over every anchor.
    ls_cls = _log_softmax(student.cls_logits, 1.0)
    onehot = np.zeros((a, n_classes))
    onehot[np.arange(a), truth.labels] = 1.0
    l_cls = float(-ls_cls[np.arange(a), truth.labels].mean())
    grad_cls += cfg.w_cls * (np.exp(ls_cls) - onehot) / a

    main_idx = np.flatnonzero(masks.main)
    vlr_idx = np.flatnonzero(masks.vlr)
    k_main = main_idx.size

    l_reg = 0.0
    l_dfl = 0.0
    if k_main:
        z_main = student.edge_logits[main_idx]
        ls_e = _log_softmax(z_main, 1.0)
        p_e = np.exp(ls_e)
        targets = truth.edge_targets[main_idx]
        idx, u1, u2 = _encode_targets_batch(targets, cfg.grid)

        rows = np.arange(k_main)[:, None]
        cols = np.arange(n_edges)[None, :]
        l_dfl = float(-(u1 * ls_e[rows, cols, idx] + u2 * ls_e[rows, cols, idx + 1]).sum()
                      / k_main)
        two_hot = np.zeros_like(p_e)
        two_hot[rows, cols, idx] += u1
        two_hot[rows, cols, idx + 1] += u2
        grad_edges[main_idx] += cfg.w_dfl * (p_e - two_hot) / k_main

        yhat = p_e @ endpoints
        points = truth.points[main_idx]
        boxes_s = _boxes_from_edges(points, yhat)
        boxes_g = _boxes_from_edges(points, targets)
        giou_vals, dgiou = _giou_batch(boxes_s, boxes_g)
        l_reg = float((1.0 - giou_vals).mean())
        g_edge_vals = _box_grad_to_edges(-cfg.w_reg * dgiou / k_main)
        grad_edges[main_idx] += _expectation_chain(p_e, endpoints, g_edge_vals)

    ld_main = ld_vlr = kd_main = kd_vlr = 0.0
    if cfg.distills and teacher is not None:
        if cfg.w_ld_main > 0.0 and k_main:
            ld_main, g = _tempered_kl_block(
                student.edge_logits[main_idx], teacher.edge_logits[main_idx], cfg.tau)
            grad_edges[main_idx] += cfg.w_ld_main * g
        if cfg.w_ld_vlr > 0.0 and vlr_idx.size:
            ld_vlr, g = _tempered_kl_block(
                student.edge_logits[vlr_idx], teacher.edge_logits[vlr_idx], cfg.tau)
            grad_edges[vlr_idx] += cfg.w_ld_vlr * g
        if cfg.w_kd_main > 0.0 and k_main:
            kd_main, g = _tempered_kl_block(
                student.cls_logits[main_idx], teacher.cls_logits[main_idx], cfg.tau)
            grad_cls[main_idx] += cfg.w_kd_main * g
        if cfg.w_kd_vlr > 0.0 and vlr_idx.size:
            kd_vlr, g = _tempered_kl_block(
                student.cls_logits[vlr_idx], teacher.cls_logits[vlr_idx], cfg.tau)
            grad_cls[vlr_idx] += cfg.w_kd_vlr * g

    components = {
        "cls": l_cls,
        "reg": l_reg,
        "dfl": l_dfl,
        "ld_main": ld_main,
        "ld_vlr": ld_vlr,
        "kd_main": kd_main,
        "kd_vlr": kd_vlr,
    }
    value = (cfg.w_cls * l_cls + cfg.w_reg * l_reg + cfg.w_dfl * l_dfl
             + cfg.w_ld_main * ld_main + cfg.w_ld_vlr * ld_vlr
             + cfg.w_kd_main * kd_main + cfg.w_kd_vlr * kd_vlr)
    grad = np.concatenate([grad_cls.ravel(), grad_edges.ravel()])
    return LossResult(value=value, grad=grad, components=components)


def scene_tbr_loss(
    student: SceneOutputs,
    teacher: SceneOutputs,
    truth: SceneTruth,
    main_mask: np.ndarray,
    cfg: DistillConfig,
) -> LossResult:
    """Teacher-bounded regression over the main region of a scene.

    Boxes are decoded from the edge expectations of both models; the gate
    and loss follow :func:`tbr_loss` per anchor, averaged over main
    positives, and the gradient flows back to the student edge logits
    through the expectation decode. Flat layout as in :func:`total_loss`.
    """
    a, n_classes = student.cls_logits.shape
    _, n_edges, n_bins = student.edge_logits.shape
    if cfg.grid.e_min < 0.0:
        raise ValueError(
            "teacher-bounded regression needs nonnegative edge distances (grid.e_min >= 0)"
        )
    main_mask = np.asarray(main_mask, dtype=bool)
    if main_mask.shape != (a,):
        raise ValueError(f"main mask shape {main_mask.shape} does not match {a} anchors")
    grad_edges = np.zeros_like(student.edge_logits)
    main_idx = np.flatnonzero(main_mask)
    value = 0.0
    if main_idx.size:
        k = main_idx.size
        endpoints = cfg.grid.endpoints
        p_s = np.exp(_log_softmax(student.edge_logits[main_idx], 1.0))
        p_t = np.exp(_log_softmax(teacher.edge_logits[main_idx], 1.0))
        points = truth.points[main_idx]
        boxes_s = _boxes_from_edges(points, p_s @ endpoints)
        boxes_t = _boxes_from_edges(points, p_t @ endpoints)
        boxes_g = _boxes_from_edges(points, truth.edge_targets[main_idx])
        active = _corner_l2(boxes_s, boxes_g) + cfg.tbr_margin > _corner_l2(boxes_t, boxes_g)
        if np.any(active):
            giou_vals, dgiou = _giou_batch(boxes_s[active], boxes_g[active])
            value = float((1.0 - giou_vals).sum() / k)
            g_edge_vals = _box_grad_to_edges(-dgiou / k)
            grad_edges[main_idx[active]] += _expectation_chain(
                p_s[active], endpoints, g_edge_vals)
    grad = np.concatenate([np.zeros(a * n_classes), grad_edges.ravel()])
    return LossResult(value=value, grad=grad)
