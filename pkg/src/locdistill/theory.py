"""Numerical certification of the distillation-vs-supervision identities.

Three facts are checked to double precision:

1. The distillation gradient against a convex combination of two target
   distributions equals the same convex combination of the gradients against
   each target separately (checked through the real loss code path).
2. Any localization probability vector decomposes into two classification
   probabilities under the affine system {sum p = 1, sum q = 1,
   u1*p + u2*q = l}; the system's coefficient matrix has rank ``len(l) + 1``
   and a minimum-norm solution reconstructs ``l`` exactly.
3. Adding distillation to the two-hot supervised loss rescales its
   per-logit gradient by ``gamma + (lam / tau) * c_i / (u_i - p_i)`` in
   expectation under an additive teacher-confidence model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .boxdist import TwoHotTarget, PROB_SUM_TOL
from .losses import dfl_loss, kd_loss

__all__ = [
    "DecompositionResult",
    "RescalingReport",
    "verify_proposition1",
    "decompose_localization",
    "gradient_rescaling_ratio",
    "incorrect_position_gradient_sum",
    "certify_proposition1",
    "certify_decomposition",
    "certify_rescaling",
]

logger = logging.getLogger(__name__)

SIMPLEX_FLOOR = 1e-9


def _check_simplex(p, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError(f"{name} must be a 1-D probability vector, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p <= 0.0):
        raise ValueError(f"{name} must be strictly positive (logit reconstruction needs log)")
    if abs(p.sum() - 1.0) > PROB_SUM_TOL:
        raise ValueError(f"{name} must sum to 1, got {p.sum()!r}")
    return p


def _logits_for(p: np.ndarray, tau: float) -> np.ndarray:
    """Logits whose tempered softmax reproduces ``p`` (up to rounding)."""
    return tau * np.log(p)


def verify_proposition1(s, p, q, u1: float, tau: float,
                        perturbation: float = 0.0) -> float:
    """Max elementwise gap between the combined-target gradient and the
    combination of per-target gradients.

    All three inputs are tempered probability vectors; the gradients are
    computed through :func:`locdistill.losses.kd_loss` on reconstructed
    logits. ``perturbation`` biases the combined-target gradient and exists
    only as a negative-control hook for the verification CLI.
    """
    s = _check_simplex(s, "student probabilities")
    p = _check_simplex(p, "first target")
    q = _check_simplex(q, "second target")
    if s.shape != p.shape or p.shape != q.shape:
        raise ValueError("probability vectors must share one length")
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    u2 = 1.0 - u1
    combined = u1 * p + u2 * q
    z_s = _logits_for(s, tau)
    g_combined = kd_loss(z_s, _logits_for(combined, tau), tau).grad + perturbation
    g_p = kd_loss(z_s, _logits_for(p, tau), tau).grad
    g_q = kd_loss(z_s, _logits_for(q, tau), tau).grad
    return float(np.abs(g_combined - (u1 * g_p + u2 * g_q)).max())


@dataclass(frozen=True)
class DecompositionResult:
    """Decomposition of a localization probability into two classification ones."""

    p: np.ndarray
    q: np.ndarray
    residual: float
    simplex_feasible: bool


def _decomposition_system(l: np.ndarray, u1: float) -> tuple[np.ndarray, np.ndarray]:
    m = l.shape[0]
    u2 = 1.0 - u1
    rows = np.zeros((m + 2, 2 * m))
    rows[0, :m] = 1.0
    rows[1, m:] = 1.0
    rows[2:, :m] = u1 * np.eye(m)
    rows[2:, m:] = u2 * np.eye(m)
    b = np.concatenate([[1.0, 1.0], l])
    return rows, b


def decompose_localization(l, u1: float, i: int, j: int,
                           projection_iters: int = 200) -> DecompositionResult:
    """Solve {sum p = 1, sum q = 1, u1*p + u2*q = l} for (p, q).

    Returns the minimum-norm solution of the underdetermined system. When
    that solution leaves the simplex, an alternating-projection pass looks
    for a nonnegative solution; ``simplex_feasible`` reports the outcome.
    ``i`` and ``j`` identify the bracketing positions of the underlying
    two-hot target and must differ; they do not affect the algebra.
    """
    l = np.asarray(l, dtype=np.float64)
    if l.ndim != 1:
        raise ValueError(f"localization vector must be 1-D, got shape {l.shape}")
    m = l.shape[0]
    if not (0.0 < u1 < 1.0):
        raise ValueError(f"u1 must lie strictly inside (0, 1), got {u1}")
    if i == j:
        raise ValueError("bracketing indices must differ")
    if not (0 <= i < m and 0 <= j < m):
        raise ValueError(f"indices ({i}, {j}) out of range for length {m}")

    a_mat, b = _decomposition_system(l, u1)
    pinv = np.linalg.pinv(a_mat)
    x = pinv @ b

    def affine_project(v: np.ndarray) -> np.ndarray:
        return v - pinv @ (a_mat @ v - b)

    feasible = bool(x.min() >= -1e-10)
    if not feasible:
        y = x.copy()
        for _ in range(projection_iters):
            y = affine_project(np.maximum(y, 0.0))
            if y.min() >= -1e-10:
                break
        if y.min() >= -1e-10:
            x, feasible = y, True

    p, q = x[:m], x[m:]
    residual = float(np.abs(u1 * p + (1.0 - u1) * q - l).max())
    residual = max(residual, abs(float(p.sum()) - 1.0), abs(float(q.sum()) - 1.0))
    return DecompositionResult(p=p, q=q, residual=residual, simplex_feasible=feasible)


@dataclass(frozen=True)
class RescalingReport:
    """Measured vs. predicted gradient-rescaling ratio at the probed index."""

    measured_ratio: float
    predicted_ratio: float
    abs_error: float
    std_error: float | None = None
    trials: int = 0

    def __post_init__(self) -> None:
        for name in ("measured_ratio", "predicted_ratio", "abs_error"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if abs(self.abs_error - abs(self.measured_ratio - self.predicted_ratio)) > 1e-15:
            raise ValueError("abs_error must equal |measured - predicted|")


def _prepare_confidence(p_tau: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Center the confidence vector and shrink it until the teacher stays
    strictly inside the simplex; any shrink is logged."""
    c = c - c.mean()
    scale = 1.0
    floor = 1e-6
    q = p_tau + c
    if q.min() < floor:
        worst = (p_tau - floor) / np.maximum(-c, 1e-300)
        scale = min(1.0, float(worst[c < 0.0].min())) if np.any(c < 0.0) else 1.0
        logger.warning("confidence vector scaled by %.6g to keep the teacher on the simplex", scale)
        c = scale * c
    return c


def gradient_rescaling_ratio(
    p,
    c,
    eta_scale: float,
    gamma: float,
    lam: float,
    tau: float,
    target: TwoHotTarget,
    trials: int = 0,
    rng: np.random.Generator | None = None,
) -> RescalingReport:
    """Measure the per-logit gradient rescaling that distillation applies to
    the two-hot supervised loss, and compare it to the closed form
    ``gamma + (lam / tau) * c_i / (u_i - p_i)``.

    The teacher's tempered distribution follows the additive model
    ``q_tau = p_tau + c + eta`` with ``eta`` zero-mean noise of scale
    ``eta_scale``. With ``eta_scale = 0`` the measured ratio is computed
    through the real loss code paths and must match exactly; with noise the
    ratio is averaged over ``trials`` Monte-Carlo draws.
    """
    p = _check_simplex(p, "student probabilities")
    c = np.asarray(c, dtype=np.float64)
    if c.shape != p.shape:
        raise ValueError(f"confidence vector shape {c.shape} does not match {p.shape}")
    if tau <= 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if eta_scale < 0.0:
        raise ValueError(f"eta_scale must be nonnegative, got {eta_scale}")
    i = target.i
    if i + 1 >= p.shape[0]:
        raise ValueError("two-hot target index out of range for the probability vector")
    denom = target.u1 - p[i]
    if abs(denom) < 1e-9:
        raise ValueError("predicted ratio is singular: u_i equals p_i at the probed index")

    z_s = np.log(p)
    p_tau = np.exp(z_s / tau - (z_s / tau).max())
    p_tau = p_tau / p_tau.sum()
    c_eff = _prepare_confidence(p_tau, c)
    predicted = gamma + (lam / tau) * c_eff[i] / denom
    dfl_grad_i = dfl_loss(z_s, target).grad[i]

    if eta_scale == 0.0:
        q_tau = p_tau + c_eff
        ld_grad_i = (gamma * dfl_grad_i
                     + lam * kd_loss(z_s, _logits_for(q_tau, tau), tau).grad[i])
        measured = float(ld_grad_i / dfl_grad_i)
        return RescalingReport(
            measured_ratio=measured,
            predicted_ratio=float(predicted),
            abs_error=abs(measured - predicted),
            trials=0,
        )

    if trials < 2:
        raise ValueError("Monte-Carlo mode needs at least 2 trials")
    if rng is None:
        rng = np.random.default_rng(0)
    m = p.shape[0]
    ratios = np.empty(trials)
    done = 0
    while done < trials:
        draw = min(trials - done, 65536)
        eta = rng.normal(0.0, eta_scale, size=(draw, m))
        eta -= eta.mean(axis=1, keepdims=True)
        q_tau = p_tau[None, :] + c_eff[None, :] + eta
        ok = q_tau.min(axis=1) > 1e-9  # off-simplex draws are rejected and redrawn
        n_ok = int(ok.sum())
        # (gamma * dfl + (lam / tau) * (p_tau - q_tau))_i / dfl_i, vectorized
        # over trials; identical to composing dfl_loss and kd_loss gradients.
        num = gamma * dfl_grad_i + (lam / tau) * (p_tau[i] - q_tau[ok, i])
        ratios[done:done + n_ok] = num / dfl_grad_i
        done += n_ok
    measured = float(ratios.mean())
    std_error = float(ratios.std(ddof=1) / math.sqrt(trials))
    return RescalingReport(
        measured_ratio=measured,
        predicted_ratio=float(predicted),
        abs_error=abs(measured - predicted),
        std_error=std_error,
        trials=trials,
    )


def incorrect_position_gradient_sum(
    student_logits,
    teacher_logits,
    target: TwoHotTarget,
    gamma: float,
    lam: float,
    tau: float,
) -> tuple[float, float]:
    """Return ``(sum over s != i of grad_s, -grad_i)`` for the combined
    two-hot supervised + distillation gradient; the two agree because the
    gradient is tangent to the simplex (entries sum to zero)."""
    g = gamma * dfl_loss(student_logits, target).grad
    if lam != 0.0:
        g = g + lam * kd_loss(student_logits, teacher_logits, tau).grad
    i = target.i
    return float(g.sum() - g[i]), float(-g[i])


# ---------------------------------------------------------------------------
# randomized certificates (consumed by the verification CLI)
# ---------------------------------------------------------------------------

def _spawn_rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, tag)))


def certify_proposition1(trials: int = 1000, sizes: tuple[int, ...] = (5, 9, 17),
                         seed: int = 0, perturbation: float = 0.0) -> dict:
    """Randomized certificate for the combined-target gradient identity."""
    rng = _spawn_rng(seed, 1)
    worst = 0.0
    for k in range(trials):
        m = sizes[k % len(sizes)]
        s = rng.dirichlet(np.ones(m))
        p = rng.dirichlet(np.ones(m))
        q = rng.dirichlet(np.ones(m))
        u1 = rng.uniform(0.05, 0.95)
        tau = rng.uniform(1.0, 20.0)
        worst = max(worst, verify_proposition1(s, p, q, u1, tau, perturbation=perturbation))
    return {"max_discrepancy": worst, "trials": trials, "sizes": list(sizes)}


def certify_decomposition(trials: int = 1000, sizes: tuple[int, ...] = (5, 9, 17),
                          seed: int = 0) -> dict:
    """Randomized certificate for the decomposition residual and rank."""
    rng = _spawn_rng(seed, 2)
    worst = 0.0
    ranks_ok = True
    for k in range(trials):
        m = sizes[k % len(sizes)]
        l = rng.dirichlet(np.ones(m))
        u1 = rng.uniform(0.05, 0.95)
        i, j = rng.choice(m, size=2, replace=False)
        result = decompose_localization(l, u1, int(i), int(j))
        worst = max(worst, result.residual)
        a_mat, _ = _decomposition_system(l, u1)
        if np.linalg.matrix_rank(a_mat) != m + 1:
            ranks_ok = False
    return {"max_residual": worst, "rank_ok": ranks_ok, "trials": trials, "sizes": list(sizes)}


def certify_rescaling(trials: int = 1000, seed: int = 0, size: int = 9,
                      mc_instances: int = 5, mc_trials: int = 100_000,
                      eta_scale: float = 0.01) -> dict:
    """Randomized certificate for the gradient-rescaling corollary.

    The noise-free identity is checked over ``trials`` random instances;
    the noisy expectation over ``mc_instances`` Monte-Carlo runs of
    ``mc_trials`` draws each, requiring agreement within 3 standard errors.
    """
    rng = _spawn_rng(seed, 3)

    def random_instance():
        p = rng.dirichlet(np.ones(size))
        i = int(rng.integers(0, size - 1))
        u1 = rng.uniform(0.05, 0.95)
        target = TwoHotTarget(i=i, u1=u1, u2=1.0 - u1)
        if abs(target.u1 - p[i]) < 0.05:  # keep the probed ratio well-conditioned
            return None
        c = rng.normal(0.0, 0.01, size=size)
        gamma = rng.uniform(0.25, 2.0)
        lam = rng.uniform(0.25, 2.0)
        tau = rng.uniform(1.0, 20.0)
        return p, c, gamma, lam, tau, target

    worst = 0.0
    done = 0
    while done < trials:
        inst = random_instance()
        if inst is None:
            continue
        p, c, gamma, lam, tau, target = inst
        report = gradient_rescaling_ratio(p, c, 0.0, gamma, lam, tau, target)
        worst = max(worst, report.abs_error)
        done += 1

    mc_max_err_over_se = 0.0
    mc_ok = True
    done = 0
    while done < mc_instances:
        inst = random_instance()
        if inst is None:
            continue
        p, c, gamma, lam, tau, target = inst
        report = gradient_rescaling_ratio(
            p, c, eta_scale, gamma, lam, tau, target,
            trials=mc_trials, rng=_spawn_rng(seed, 4 + done))
        ratio = report.abs_error / report.std_error if report.std_error else 0.0
        mc_max_err_over_se = max(mc_max_err_over_se, ratio)
        mc_ok = mc_ok and report.abs_error <= 3.0 * report.std_error
        done += 1

    return {
        "max_abs_error": worst,
        "trials": trials,
        "mc_ok": mc_ok,
        "mc_max_err_over_se": mc_max_err_over_se,
        "mc_instances": mc_instances,
        "mc_trials": mc_trials,
        "eta_scale": eta_scale,
    }
