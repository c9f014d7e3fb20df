"""Teacher-student training schemes, evaluation metrics, and sweeps.

Training is deterministic full-batch gradient descent with fixed per-block
steps; every gradient comes from the loss module's closed forms. The
teacher is trained against the true edge mixtures (soft distribution
targets plus regression to the true boxes), emulating a stronger,
longer-trained model; students see only the sampled observations plus
whatever distillation signal their scheme enables.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..boxdist import BinGrid
from ..losses import (
    DistillConfig,
    SceneOutputs,
    feature_imitation_loss,
    scene_tbr_loss,
    split_scene_grad,
    total_loss,
    _log_softmax,
)
from .data import (
    Dataset,
    HarnessConfig,
    N_CLASSES,
    N_EDGES,
    gen_dataset,
    stack_scene,
)
from .models import LinearLocalizer, init_localizer

__all__ = [
    "SchemeSpec",
    "SCHEMES",
    "ExperimentReport",
    "train",
    "train_teacher",
    "evaluate",
    "run_cell",
    "run_experiment",
    "ambiguity_sweep",
]

_SEED_TAG_TEACHER = 0x7EAC
_SEED_TAG_STUDENT = 0x57D0

TRACE_COLUMNS = ("step", "L_cls", "L_reg", "L_DFL", "LD_main", "LD_vlr",
                 "KD_main", "KD_vlr", "total")


@dataclass(frozen=True)
class SchemeSpec:
    """Which loss terms a training scheme enables."""

    needs_teacher: bool
    ld_main: bool = False
    ld_vlr: bool = False
    kd_main: bool = False
    kd_vlr: bool = False
    tbr: bool = False
    fi: bool = False


SCHEMES: dict[str, SchemeSpec] = {
    "baseline": SchemeSpec(needs_teacher=False),
    "tbr": SchemeSpec(needs_teacher=True, tbr=True),
    "kd_main": SchemeSpec(needs_teacher=True, kd_main=True),
    "ld_main": SchemeSpec(needs_teacher=True, ld_main=True),
    "ld_main_vlr": SchemeSpec(needs_teacher=True, ld_main=True, ld_vlr=True),
    "selective": SchemeSpec(needs_teacher=True, ld_main=True, ld_vlr=True,
                            kd_main=True),
    "feature_imitation": SchemeSpec(needs_teacher=True, fi=True),
}


def scheme_config(scheme: SchemeSpec, base: DistillConfig,
                  ld_weight_boost: float = 1.0,
                  ld_dfl_scale: float = 1.0) -> DistillConfig:
    """Zero out the distillation weights a scheme does not use and apply the
    desk-scale knobs (see :class:`HarnessConfig`).

    In LD schemes the two-hot supervised term runs at a reduced weight:
    the distilled distributions carry the edge supervision, and at full
    weight the noisy sampled targets drown the teacher signal.
    """
    distills_boxes = scheme.ld_main or scheme.ld_vlr
    return replace(
        base,
        w_dfl=base.w_dfl * ld_dfl_scale if distills_boxes else base.w_dfl,
        w_ld_main=base.w_ld_main * ld_weight_boost if scheme.ld_main else 0.0,
        w_ld_vlr=base.w_ld_vlr * ld_weight_boost if scheme.ld_vlr else 0.0,
        w_kd_main=base.w_kd_main if scheme.kd_main else 0.0,
        w_kd_vlr=base.w_kd_vlr if scheme.kd_vlr else 0.0,
    )


def _resolve_scheme(scheme: str) -> SchemeSpec:
    if scheme not in SCHEMES:
        raise ValueError(
            f"unknown scheme {scheme!r}; valid schemes: {', '.join(sorted(SCHEMES))}"
        )
    return SCHEMES[scheme]


def _apply_update(model: LinearLocalizer, g_cls, g_edges, g_hidden,
                  hidden, x, cfg: HarnessConfig) -> None:
    d_cls = g_cls.T @ hidden
    d_edges = np.einsum("aem,ah->emh", g_edges, hidden)
    model.cls_weights -= cfg.lr * d_cls
    model.edge_weights -= cfg.lr * cfg.edge_lr_scale * d_edges
    if cfg.train_features:
        d_feat = g_hidden.T @ x
        model.feature_weights -= cfg.lr * cfg.feature_lr_scale * d_feat


def _hidden_grad(model: LinearLocalizer, g_cls, g_edges) -> np.ndarray:
    return g_cls @ model.cls_weights + np.einsum("aem,emh->ah", g_edges, model.edge_weights)


def train(
    model: LinearLocalizer,
    dataset: Dataset,
    scheme: str,
    teacher: LinearLocalizer | None,
    cfg: HarnessConfig,
    dcfg: DistillConfig,
) -> tuple[LinearLocalizer, list[dict]]:
    """Train a student in place under one scheme; returns the model and the
    per-epoch loss trace (components before each update step)."""
    spec = _resolve_scheme(scheme)
    if not model.trainable:
        raise ValueError("model is frozen; cannot train")
    if spec.needs_teacher and teacher is None:
        raise ValueError(f"scheme {scheme!r} distills from a teacher but none was given")
    run_cfg = scheme_config(spec, dcfg, cfg.ld_weight_boost, cfg.ld_dfl_scale)

    stack = stack_scene(dataset.train, dataset.grid)
    x = stack.features
    a = x.shape[0]
    teacher_out: SceneOutputs | None = None
    teacher_hidden = None
    if teacher is not None:
        teacher_out, teacher_hidden = teacher.forward(x)
    if spec.fi and teacher_hidden is not None \
            and teacher_hidden.shape[1] != model.hidden_dim:
        raise ValueError(
            "feature imitation needs matching hidden sizes "
            f"(student {model.hidden_dim}, teacher {teacher_hidden.shape[1]})"
        )

    dims = (a, N_CLASSES, N_EDGES, dataset.grid.size)
    trace: list[dict] = []
    for step in range(cfg.epochs):
        out, hidden = model.forward(x)
        res = total_loss(out, teacher_out, stack.truth, stack.masks, run_cfg)
        value = res.value
        g_cls, g_edges = split_scene_grad(res.grad, *dims)
        if spec.tbr:
            tbr = scene_tbr_loss(out, teacher_out, stack.truth, stack.masks.main, run_cfg)
            value += cfg.tbr_weight * tbr.value
            g_edges = g_edges + cfg.tbr_weight * split_scene_grad(tbr.grad, *dims)[1]
        g_hidden = _hidden_grad(model, g_cls, g_edges)
        if spec.fi:
            fi = feature_imitation_loss(hidden, teacher_hidden, np.ones(a, dtype=bool))
            value += cfg.fi_weight * fi.value
            g_hidden = g_hidden + cfg.fi_weight * fi.grad
        comps = res.components
        trace.append({
            "step": step,
            "L_cls": comps["cls"],
            "L_reg": comps["reg"],
            "L_DFL": comps["dfl"],
            "LD_main": comps["ld_main"],
            "LD_vlr": comps["ld_vlr"],
            "KD_main": comps["kd_main"],
            "KD_vlr": comps["kd_vlr"],
            "total": value,
        })
        _apply_update(model, g_cls, g_edges, g_hidden, hidden, x, cfg)
    return model, trace


def train_teacher(
    dataset: Dataset,
    cfg: HarnessConfig,
    dcfg: DistillConfig,
    seed: int,
) -> LinearLocalizer:
    """Train the teacher on the true mixtures and freeze it.

    Supervision: classification cross-entropy everywhere, soft
    cross-entropy against the binned true mixture plus regression to the
    true box on main positives.
    """
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), _SEED_TAG_TEACHER)))
    model = init_localizer(cfg.input_dim, cfg.teacher_hidden_dim, N_CLASSES,
                           N_EDGES, dataset.grid.size, rng)
    stack = stack_scene(dataset.train, dataset.grid)
    x = stack.features
    a = x.shape[0]
    main_idx = np.flatnonzero(stack.masks.main)
    k = main_idx.size
    # Regression/soft-distribution supervision targets the true geometry.
    true_truth = replace(stack.truth, edge_targets=stack.true_edges)
    reg_cfg = replace(dcfg, w_dfl=0.0, w_ld_main=0.0, w_ld_vlr=0.0,
                      w_kd_main=0.0, w_kd_vlr=0.0)
    # Smoothed distribution targets keep the teacher's logits bounded, so
    # distilling students have a finite equilibrium to converge to.
    m = dataset.grid.size
    bayes_main = ((1.0 - cfg.label_smoothing) * stack.bayes[main_idx]
                  + cfg.label_smoothing / m)

    epochs = cfg.teacher_epochs
    dims = (a, N_CLASSES, N_EDGES, dataset.grid.size)
    for _ in range(epochs):
        out, hidden = model.forward(x)
        res = total_loss(out, None, true_truth, stack.masks, reg_cfg)
        g_cls, g_edges = split_scene_grad(res.grad, *dims)
        if k:
            ls = _log_softmax(out.edge_logits[main_idx], 1.0)
            g_edges[main_idx] += (np.exp(ls) - bayes_main) / k
        g_hidden = _hidden_grad(model, g_cls, g_edges)
        _apply_update(model, g_cls, g_edges, g_hidden, hidden, x, cfg)
    model.trainable = False
    return model


@dataclass(frozen=True)
class ExperimentReport:
    """Held-out metrics for one (scheme, seed) run."""

    scheme: str
    seed: int
    mae_edges: float
    kl_box: float
    kl_cls: float
    pearson_features: float
    pearson_box_logits: float
    flatness: float
    trace: tuple[dict, ...] = ()

    METRICS = ("mae_edges", "kl_box", "kl_cls", "pearson_features",
               "pearson_box_logits", "flatness")

    def __post_init__(self) -> None:
        for name in self.METRICS:
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ValueError(f"report metric {name} must be finite, got {v!r}")
            object.__setattr__(self, name, v)
        for name in ("pearson_features", "pearson_box_logits"):
            v = getattr(self, name)
            if not (-1.0 - 1e-12 <= v <= 1.0 + 1e-12):
                raise ValueError(f"{name} must lie in [-1, 1], got {v}")
        object.__setattr__(self, "trace", tuple(self.trace))

    def rows(self) -> list[tuple[str, int, str, float]]:
        """Long-format (scheme, seed, metric, value) rows."""
        return [(self.scheme, self.seed, m, getattr(self, m)) for m in self.METRICS]


def _mean_pearson_columns(a: np.ndarray, b: np.ndarray) -> float:
    """Per-dimension Pearson correlation across samples, averaged over dims.

    Constant dimensions correlate as 1 when the two sides agree exactly and
    0 otherwise (the usual 0/0 case is undefined; this keeps self-comparison
    at exactly 1).
    """
    if a.shape != b.shape:
        raise ValueError(f"correlation needs matching shapes, got {a.shape} vs {b.shape}")
    a0 = a - a.mean(axis=0)
    b0 = b - b.mean(axis=0)
    sa = np.sqrt((a0 * a0).sum(axis=0))
    sb = np.sqrt((b0 * b0).sum(axis=0))
    live = (sa > 0.0) & (sb > 0.0)
    r = np.zeros(a.shape[1])
    r[live] = (a0[:, live] * b0[:, live]).sum(axis=0) / (sa[live] * sb[live])
    both_const = (sa == 0.0) & (sb == 0.0)
    r[both_const] = np.where(
        np.all(a[:, both_const] == b[:, both_const], axis=0), 1.0, 0.0)
    return float(r.mean())


def _mean_kl(z_teacher: np.ndarray, z_student: np.ndarray) -> float:
    """Teacher-to-student KL at unit temperature, averaged per anchor."""
    ls = _log_softmax(z_student, 1.0)
    lt = _log_softmax(z_teacher, 1.0)
    q = np.exp(lt)
    return float((q * (lt - ls)).sum() / z_teacher.shape[0])


def evaluate(model: LinearLocalizer, teacher: LinearLocalizer, dataset: Dataset,
             scheme: str = "", seed: int = 0,
             trace: list[dict] | tuple[dict, ...] = ()) -> ExperimentReport:
    """Held-out metrics: decoded-edge MAE on positives, teacher-student KL
    per head, per-dimension Pearson correlations, and distribution flatness."""
    if not dataset.heldout:
        raise ValueError("dataset has no held-out split to evaluate on")
    stack = stack_scene(dataset.heldout, dataset.grid)
    x = stack.features
    out_s, h_s = model.forward(x)
    out_t, h_t = teacher.forward(x)

    main_idx = np.flatnonzero(stack.masks.main)
    if main_idx.size == 0:
        raise ValueError("held-out split has no main positives to score MAE on")
    p_edges = np.exp(_log_softmax(out_s.edge_logits, 1.0))
    decoded = p_edges @ dataset.grid.endpoints
    mae = float(np.abs(decoded[main_idx] - stack.true_edges[main_idx]).mean())

    p_main = p_edges[main_idx]
    log_p = np.log(np.where(p_main > 0, p_main, 1.0))  # 0 log 0 := 0
    entropy = float(-(p_main * log_p).sum(axis=-1).mean())

    a = x.shape[0]
    return ExperimentReport(
        scheme=scheme,
        seed=seed,
        mae_edges=mae,
        kl_box=_mean_kl(out_t.edge_logits, out_s.edge_logits),
        kl_cls=_mean_kl(out_t.cls_logits, out_s.cls_logits),
        pearson_features=_mean_pearson_columns(h_t, h_s),
        pearson_box_logits=_mean_pearson_columns(
            out_t.edge_logits.reshape(a, -1), out_s.edge_logits.reshape(a, -1)),
        flatness=entropy,
        trace=tuple(trace),
    )


def _new_student(cfg: HarnessConfig, grid: BinGrid, seed: int) -> LinearLocalizer:
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), _SEED_TAG_STUDENT)))
    return init_localizer(cfg.input_dim, cfg.hidden_dim, N_CLASSES, N_EDGES,
                          grid.size, rng)


def run_cell(cfg: HarnessConfig, dcfg: DistillConfig, scheme: str, seed: int,
             dataset: Dataset | None = None,
             teacher: LinearLocalizer | None = None) -> ExperimentReport:
    """Run one (scheme, seed) cell end to end; dataset and teacher may be
    passed in to share work across schemes of the same seed."""
    spec = _resolve_scheme(scheme)
    if dataset is None:
        dataset = gen_dataset(cfg, dcfg, seed)
    if teacher is None:
        teacher = train_teacher(dataset, cfg, dcfg, seed)
    student = _new_student(cfg, dataset.grid, seed)
    student, trace = train(student, dataset, scheme,
                           teacher if spec.needs_teacher else None, cfg, dcfg)
    return evaluate(student, teacher, dataset, scheme=scheme, seed=seed, trace=trace)


def run_experiment(cfg: HarnessConfig, dcfg: DistillConfig,
                   schemes: list[str], seeds: list[int]) -> list[ExperimentReport]:
    """Run every (scheme, seed) cell serially, sharing the per-seed dataset
    and teacher; cells are independent, so results do not depend on order."""
    for s in schemes:
        _resolve_scheme(s)
    if not schemes or not seeds:
        raise ValueError("experiment needs at least one scheme and one seed")
    reports = []
    for seed in seeds:
        dataset = gen_dataset(cfg, dcfg, seed)
        teacher = train_teacher(dataset, cfg, dcfg, seed)
        for scheme in schemes:
            reports.append(run_cell(cfg, dcfg, scheme, seed, dataset, teacher))
    return reports


def ambiguity_sweep(cfg: HarnessConfig, dcfg: DistillConfig, levels: list[float],
                    schemes: list[str], seeds: list[int]) -> list[dict]:
    """Metrics per (ambiguity level, scheme, seed), long format."""
    if not levels:
        raise ValueError("ambiguity sweep needs at least one level")
    rows = []
    for level in levels:
        level_cfg = replace(cfg, ambiguity=float(level))
        for report in run_experiment(level_cfg, dcfg, schemes, seeds):
            for scheme, seed, metric, value in report.rows():
                rows.append({"ambiguity": float(level), "scheme": scheme,
                             "seed": seed, "metric": metric, "value": value})
    return rows
