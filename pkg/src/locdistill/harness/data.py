"""Synthetic anchor-level dataset with controllable edge ambiguity.

Each sample is one anchor looking at one object. The object's four edge
distances are drawn per sample; ambiguous edges carry a two-component
mixture of plausible positions and the observed training target is a draw
from that mixture, so the Bayes-optimal edge distribution is genuinely
non-degenerate. Region membership (main positive / VLR / neither) comes
from the real assignment code on the sample's anchor and ground-truth
boxes. Features are a fixed random linear encoding of the latent geometry
plus isotropic noise, which keeps every head learnable by a linear model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ..boxdist import BinGrid, encode_target
from ..geometry import BoundingBox
from ..losses import DistillConfig, SceneTruth
from ..regions import RegionMasks, compute_region_masks

__all__ = [
    "EdgeAmbiguity",
    "SyntheticSample",
    "Dataset",
    "HarnessConfig",
    "gen_dataset",
    "sample_edge_value",
    "binned_mixture",
    "SceneStack",
    "stack_scene",
    "save_dataset",
    "load_dataset",
]

N_EDGES = 4
N_CLASSES = 2

# Object geometry relative to its own reference point, in scene units.
_OBJECT_EDGE_LO = 1.7
_OBJECT_EDGE_HI = 2.7
_VLR_SHIFT = (1.8, 3.5)
_BACKGROUND_SHIFT = (5.0, 7.0)
_N_LATENT = 11  # 4 edges + 4 ambiguity spreads + dx + dy + squared offset

_SEED_TAG_DATA = 0xD47A


@dataclass(frozen=True)
class EdgeAmbiguity:
    """Mixture of plausible positions for one edge (centers + weights)."""

    centers: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        centers = tuple(float(c) for c in self.centers)
        weights = tuple(float(w) for w in self.weights)
        if len(centers) != len(weights) or not centers:
            raise ValueError("mixture needs matching, non-empty centers and weights")
        if any(w < 0.0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "weights", weights)

    @property
    def mean(self) -> float:
        return float(sum(c * w for c, w in zip(self.centers, self.weights)))


def sample_edge_value(amb: EdgeAmbiguity, rng: np.random.Generator) -> float:
    """Draw one observed edge position from the mixture."""
    k = rng.choice(len(amb.centers), p=np.asarray(amb.weights))
    return amb.centers[k]


def binned_mixture(amb: EdgeAmbiguity, grid: BinGrid) -> np.ndarray:
    """Project the mixture onto the grid: weighted sum of two-hot encodings."""
    out = np.zeros(grid.size)
    for c, w in zip(amb.centers, amb.weights):
        t = encode_target(c, grid)
        out[t.i] += w * t.u1
        out[t.i + 1] += w * t.u2
    return out


@dataclass(frozen=True)
class SyntheticSample:
    """One anchor: features, edge targets, ambiguity spec, and region flags."""

    features: np.ndarray
    true_edge_values: np.ndarray      # (4,) mixture means, order (t, b, l, r)
    observed_edge_values: np.ndarray  # (4,) mixture draws used as training targets
    ambiguity: tuple[EdgeAmbiguity, ...]
    class_label: int
    anchor_box: BoundingBox
    gt_box: BoundingBox
    is_main: bool
    is_vlr: bool

    def to_json_dict(self) -> dict:
        return {
            "features": [float(v) for v in self.features],
            "true_edges": [float(v) for v in self.true_edge_values],
            "observed_edges": [float(v) for v in self.observed_edge_values],
            "ambiguity": [
                {"centers": list(a.centers), "weights": list(a.weights)}
                for a in self.ambiguity
            ],
            "class_label": int(self.class_label),
            "anchor_box": self.anchor_box.to_list(),
            "gt_box": self.gt_box.to_list(),
            "main": int(self.is_main),
            "vlr": int(self.is_vlr),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SyntheticSample":
        return cls(
            features=np.asarray(d["features"], dtype=np.float64),
            true_edge_values=np.asarray(d["true_edges"], dtype=np.float64),
            observed_edge_values=np.asarray(d["observed_edges"], dtype=np.float64),
            ambiguity=tuple(
                EdgeAmbiguity(tuple(a["centers"]), tuple(a["weights"]))
                for a in d["ambiguity"]
            ),
            class_label=int(d["class_label"]),
            anchor_box=BoundingBox.from_list(d["anchor_box"]),
            gt_box=BoundingBox.from_list(d["gt_box"]),
            is_main=bool(d["main"]),
            is_vlr=bool(d["vlr"]),
        )


@dataclass(frozen=True)
class Dataset:
    train: tuple[SyntheticSample, ...]
    heldout: tuple[SyntheticSample, ...]
    grid: BinGrid

    def __post_init__(self) -> None:
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "heldout", tuple(self.heldout))


@dataclass(frozen=True)
class HarnessConfig:
    """Hyperparameters of the synthetic teacher-student experiments."""

    input_dim: int = 64
    hidden_dim: int = 48
    teacher_hidden_dim: int | None = None  # defaults to hidden_dim
    n_train: int = 192
    n_heldout: int = 128
    ambiguity: float = 0.8
    max_offset: float = 1.5
    ambiguous_edge_prob: float = 0.7
    feature_noise: float = 0.05
    frac_vlr: float = 0.25
    frac_background: float = 0.25
    epochs: int = 600
    teacher_epochs: int = 900
    lr: float = 0.1
    edge_lr_scale: float = 1.0
    feature_lr_scale: float = 1.0
    train_features: bool = True
    tbr_weight: float = 1.0
    fi_weight: float = 1.0
    # Multiplies the LD loss weights when composing scheme configs. The
    # tempered-softmax gradient carries a 1/tau factor and tau-compressed
    # probability gaps, so with plain fixed-step descent the LD terms need
    # roughly tau^2 more weight to converge within a desk-scale epoch
    # budget (a per-parameter optimizer would absorb this automatically).
    ld_weight_boost: float = 100.0
    # Scale on the two-hot supervised weight inside LD schemes: the
    # distilled distributions carry the edge supervision, so the sampled
    # targets run at reduced weight rather than fighting the teacher.
    ld_dfl_scale: float = 0.25
    # Smoothing of the teacher's distribution targets. Without it a
    # zero-ambiguity mixture is an exact two-hot, the teacher's logits grow
    # without bound, and the distilling student has no finite equilibrium
    # to converge to.
    label_smoothing: float = 0.01
    anchor_half: float = 2.0

    def __post_init__(self) -> None:
        if self.teacher_hidden_dim is None:
            object.__setattr__(self, "teacher_hidden_dim", self.hidden_dim)
        for name in ("input_dim", "hidden_dim", "teacher_hidden_dim", "n_train",
                     "n_heldout", "epochs", "teacher_epochs"):
            v = int(getattr(self, name))
            if v <= 0:
                raise ValueError(f"{name} must be positive, got {v}")
            object.__setattr__(self, name, v)
        if not (0.0 <= self.ambiguity <= 1.0):
            raise ValueError(f"ambiguity level must lie in [0, 1], got {self.ambiguity}")
        if not (0.0 <= self.ambiguous_edge_prob <= 1.0):
            raise ValueError("ambiguous_edge_prob must lie in [0, 1]")
        if self.frac_vlr < 0 or self.frac_background < 0 \
                or self.frac_vlr + self.frac_background >= 1.0:
            raise ValueError("stratum fractions must be nonnegative and leave room for positives")
        if not (0.0 <= self.label_smoothing < 1.0):
            raise ValueError("label_smoothing must lie in [0, 1)")
        for name in ("max_offset", "feature_noise", "lr", "edge_lr_scale",
                     "feature_lr_scale", "tbr_weight", "fi_weight",
                     "ld_weight_boost", "ld_dfl_scale", "anchor_half"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def _standardize_latent(edges, spreads, dx, dy) -> np.ndarray:
    mid = 0.5 * (_OBJECT_EDGE_LO + _OBJECT_EDGE_HI)
    half = 0.5 * (_OBJECT_EDGE_HI - _OBJECT_EDGE_LO)
    r2 = dx * dx + dy * dy
    return np.concatenate([
        (np.asarray(edges) - mid) / half,
        np.asarray(spreads) - 0.5,
        [dx / 3.0, dy / 3.0, (r2 - 10.0) / 15.0],
    ])


def _make_sample(
    rng: np.random.Generator,
    cfg: HarnessConfig,
    dcfg: DistillConfig,
    encoder: np.ndarray,
) -> SyntheticSample:
    grid = dcfg.grid
    stratum = rng.choice(3, p=[1.0 - cfg.frac_vlr - cfg.frac_background,
                               cfg.frac_vlr, cfg.frac_background])
    obj_edges = rng.uniform(_OBJECT_EDGE_LO, _OBJECT_EDGE_HI, size=N_EDGES)

    offset = cfg.ambiguity * cfg.max_offset
    ambiguity = []
    spreads = np.zeros(N_EDGES)
    for k in range(N_EDGES):
        if offset > 0.0 and rng.random() < cfg.ambiguous_edge_prob:
            centers = (obj_edges[k] - offset, obj_edges[k] + offset)
            if centers[0] < grid.e_min or centers[1] > grid.e_max:
                raise ValueError(
                    f"ambiguity mixture center outside regression range "
                    f"[{grid.e_min}, {grid.e_max}]: {centers}"
                )
            ambiguity.append(EdgeAmbiguity(centers, (0.5, 0.5)))
            spreads[k] = offset
        else:
            ambiguity.append(EdgeAmbiguity((obj_edges[k],), (1.0,)))

    if stratum == 0:
        dx = dy = 0.0
    else:
        lo, hi = _VLR_SHIFT if stratum == 1 else _BACKGROUND_SHIFT
        angle = rng.uniform(0.0, 2.0 * np.pi)
        radius = rng.uniform(lo, hi)
        dx, dy = radius * np.cos(angle), radius * np.sin(angle)

    t, b, l, r = obj_edges
    gt_box = BoundingBox(dx - l, dy - t, dx + r, dy + b)
    half = cfg.anchor_half
    anchor_box = BoundingBox(-half, -half, half, half)
    masks = compute_region_masks([anchor_box], [gt_box], dcfg.alpha_pos, dcfg.gamma_vlr)
    is_main = bool(masks.main[0])
    is_vlr = bool(masks.vlr[0])

    observed_obj = np.array([sample_edge_value(a, rng) for a in ambiguity])
    # Point-to-side distances seen from the anchor point at the origin;
    # rows of non-positive anchors are unsupervised placeholders, clipped
    # into the regression range.
    shift = np.array([-dy, dy, -dx, dx])
    true_dist = np.clip(obj_edges + shift, grid.e_min, grid.e_max)
    observed_dist = np.clip(observed_obj + shift, grid.e_min, grid.e_max)

    latent = _standardize_latent(obj_edges, spreads, dx, dy)
    features = encoder @ latent + cfg.feature_noise * rng.standard_normal(cfg.input_dim)
    return SyntheticSample(
        features=features,
        true_edge_values=true_dist,
        observed_edge_values=observed_dist,
        ambiguity=tuple(ambiguity),
        class_label=int(is_main),
        anchor_box=anchor_box,
        gt_box=gt_box,
        is_main=is_main,
        is_vlr=is_vlr,
    )


def gen_dataset(cfg: HarnessConfig, dcfg: DistillConfig, seed: int) -> Dataset:
    """Deterministically generate train and held-out splits for one seed."""
    mid = 0.5 * (_OBJECT_EDGE_LO + _OBJECT_EDGE_HI)
    if mid - cfg.max_offset < dcfg.grid.e_min or mid + cfg.max_offset > dcfg.grid.e_max:
        raise ValueError(
            "max_offset pushes mixture centers outside the regression range"
        )
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), _SEED_TAG_DATA)))
    encoder = rng.normal(0.0, 1.0 / np.sqrt(_N_LATENT), size=(cfg.input_dim, _N_LATENT))
    samples = [_make_sample(rng, cfg, dcfg, encoder)
               for _ in range(cfg.n_train + cfg.n_heldout)]
    return Dataset(
        train=tuple(samples[: cfg.n_train]),
        heldout=tuple(samples[cfg.n_train:]),
        grid=dcfg.grid,
    )


@dataclass(frozen=True)
class SceneStack:
    """Array view of a sample list for vectorized training and evaluation."""

    features: np.ndarray       # (A, input_dim)
    truth: SceneTruth          # labels + observed targets + points
    masks: RegionMasks
    true_edges: np.ndarray     # (A, 4)
    bayes: np.ndarray          # (A, 4, m) binned true mixtures


def stack_scene(samples, grid: BinGrid) -> SceneStack:
    if not samples:
        raise ValueError("cannot stack an empty sample list")
    features = np.stack([s.features for s in samples])
    labels = np.array([s.class_label for s in samples], dtype=np.int64)
    observed = np.stack([s.observed_edge_values for s in samples])
    true_edges = np.stack([s.true_edge_values for s in samples])
    main = np.array([s.is_main for s in samples], dtype=bool)
    vlr = np.array([s.is_vlr for s in samples], dtype=bool)
    bayes = np.stack([
        np.stack([binned_mixture(a, grid) for a in s.ambiguity]) for s in samples
    ])
    return SceneStack(
        features=features,
        truth=SceneTruth(labels=labels, edge_targets=observed),
        masks=RegionMasks(main=main, vlr=vlr),
        true_edges=true_edges,
        bayes=bayes,
    )


def save_dataset(dataset: Dataset, train_path, heldout_path) -> None:
    """Write the two splits as JSONL, one sample per line."""
    for path, split in ((train_path, dataset.train), (heldout_path, dataset.heldout)):
        with open(path, "w", encoding="utf-8") as fh:
            for sample in split:
                fh.write(json.dumps(sample.to_json_dict()) + "\n")


def load_dataset(train_path, heldout_path, grid: BinGrid) -> Dataset:
    def read(path):
        with open(path, "r", encoding="utf-8") as fh:
            return tuple(SyntheticSample.from_json_dict(json.loads(line))
                         for line in fh if line.strip())
    return Dataset(train=read(train_path), heldout=read(heldout_path), grid=grid)
