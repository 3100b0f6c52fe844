"""Bin-based box targets, focal / bin / residual losses and their analytic gradients."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, ValidationError
from .geometry import points_in_box
from .records import GroundTruth, OrientedBox3D, PointCloud, normalize_angle

__all__ = [
    "PROB_FLOOR",
    "FocalParams",
    "focal_loss",
    "focal_loss_grad",
    "cross_entropy",
    "cross_entropy_grad",
    "smooth_l1",
    "smooth_l1_grad",
    "BinConfig",
    "BinTarget",
    "BinTargets",
    "BinPredictions",
    "encode_bin_targets",
    "decode_bin_targets",
    "bin_regression_loss",
    "LossTerms",
    "rpn_loss",
    "refine_loss",
    "ForegroundMask",
    "foreground_points",
]

# floor applied to a probability before taking its log
PROB_FLOOR = 1e-12
# clamp used when callers hand raw classifier outputs to the focal term
_FOCAL_EPS = 1e-7
_TWO_PI = 2.0 * math.pi


# ----------------------------------------------------------------------
# Scalar losses
# ----------------------------------------------------------------------
@dataclass(frozen=True, slots=True)
class FocalParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValidationError(f"gamma must be >= 0, got {self.gamma}")

    @classmethod
    def from_pipeline(cls, config) -> "FocalParams":
        return cls(alpha=config.focal_alpha, gamma=config.focal_gamma)


def _check_probability(p: np.ndarray) -> None:
    if not np.all((p > 0.0) & (p < 1.0)):
        raise DomainError("probabilities must lie strictly inside (0, 1)")


def _unwrap(value: np.ndarray) -> float | np.ndarray:
    return float(value) if value.ndim == 0 else value


def focal_loss(p_t: float | np.ndarray, params: FocalParams | None = None) -> float | np.ndarray:
    """-alpha_t * (1 - p_t)**gamma * log(p_t), with alpha_t = params.alpha."""
    params = params or FocalParams()
    p = np.asarray(p_t, dtype=np.float64)
    _check_probability(p)
    return _unwrap(-params.alpha * (1.0 - p) ** params.gamma * np.log(p))


def focal_loss_grad(p_t: float | np.ndarray, params: FocalParams | None = None) -> float | np.ndarray:
    params = params or FocalParams()
    p = np.asarray(p_t, dtype=np.float64)
    _check_probability(p)
    a, g = params.alpha, params.gamma
    modulating = a * g * (1.0 - p) ** (g - 1.0) * np.log(p) if g > 0 else np.zeros_like(p)
    return _unwrap(modulating - a * (1.0 - p) ** g / p)


def cross_entropy(probs: Sequence[float] | np.ndarray, target: int) -> float:
    """Negative log of the probability assigned to the target bin."""
    p = np.asarray(probs, dtype=np.float64)
    if not 0 <= target < p.shape[-1]:
        raise ValidationError(f"target bin {target} out of range for {p.shape[-1]} bins")
    return -math.log(max(float(p[target]), PROB_FLOOR))


def cross_entropy_grad(probs: Sequence[float] | np.ndarray, target: int) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    grad = np.zeros_like(p)
    grad[target] = -1.0 / max(float(p[target]), PROB_FLOOR)
    return grad


def smooth_l1(x: float | np.ndarray, beta: float = 1.0) -> float | np.ndarray:
    d = np.abs(np.asarray(x, dtype=np.float64))
    return _unwrap(np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta))


def smooth_l1_grad(x: float | np.ndarray, beta: float = 1.0) -> float | np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    return _unwrap(np.where(np.abs(v) < beta, v / beta, np.sign(v)))


# ----------------------------------------------------------------------
# Bin encoding
# ----------------------------------------------------------------------
@dataclass(frozen=True, slots=True)
class BinConfig:
    search_range: float = 3.0
    bin_size: float = 0.5
    num_angle_bins: int = 12
    mean_size: tuple[float, float, float] = (3.9, 1.6, 1.56)

    def __post_init__(self) -> None:
        if self.search_range <= 0 or self.bin_size <= 0:
            raise ValidationError("search range and bin size must be positive")
        ratio = 2.0 * self.search_range / self.bin_size
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValidationError(f"2*S/bin_size must be an integer, got {ratio}")
        if self.num_angle_bins < 1:
            raise ValidationError("need at least one angle bin")
        if min(self.mean_size) <= 0:
            raise ValidationError("mean size must be positive")
        object.__setattr__(self, "mean_size", tuple(float(v) for v in self.mean_size))

    @classmethod
    def from_pipeline(cls, config, refinement: bool = False) -> "BinConfig":
        """Stage-one bins, or the stage-two refinement bins when `refinement` is set."""
        if refinement:
            search_range, bin_size = config.refine_search_range, config.refine_bin_size
        else:
            search_range, bin_size = config.search_range, config.bin_size
        return cls(search_range, bin_size, config.num_angle_bins, tuple(config.mean_size))

    @classmethod
    def refinement(cls, **kwargs) -> "BinConfig":
        """Stage-two bins around a proposal: S = 1.5 m, 0.5 m bins."""
        kwargs.setdefault("search_range", 1.5)
        kwargs.setdefault("bin_size", 0.5)
        return cls(**kwargs)

    @property
    def num_bins(self) -> int:
        return int(round(2.0 * self.search_range / self.bin_size))

    @property
    def angle_per_bin(self) -> float:
        return _TWO_PI / self.num_angle_bins


@dataclass(frozen=True, slots=True)
class BinTarget:
    """Ground-plane axes (x, y) are binned; z is a direct residual."""

    bin_x: int
    res_x: float
    bin_y: int
    res_y: float
    res_z: float
    bin_angle: int
    res_angle: float
    res_size: tuple[float, float, float]
    ignore: bool = False

    def as_row(self) -> tuple[float, ...]:
        return (
            self.bin_x, self.res_x, self.bin_y, self.res_y, self.res_z,
            self.bin_angle, self.res_angle, *self.res_size,
        )


def _encode_axis(delta: float, config: BinConfig) -> tuple[int, float]:
    shifted = delta + config.search_range
    bin_index = min(int(math.floor(shifted / config.bin_size)), config.num_bins - 1)
    residual = (shifted - (bin_index + 0.5) * config.bin_size) / config.bin_size
    return bin_index, residual


def _encode_angle(yaw: float, config: BinConfig) -> tuple[int, float]:
    apc = config.angle_per_bin
    shifted = (yaw % _TWO_PI + apc / 2.0) % _TWO_PI
    bin_index = min(int(math.floor(shifted / apc)), config.num_angle_bins - 1)
    return bin_index, (shifted - (bin_index + 0.5) * apc) / apc


def encode_bin_targets(
    proposal_center: Sequence[float],
    gt: OrientedBox3D,
    config: BinConfig | None = None,
) -> BinTarget:
    """Encode gt relative to a proposal; offsets outside [-S, S) flag the target ignored."""
    config = config or BinConfig()
    px, py, pz = (float(v) for v in proposal_center)
    dx, dy = gt.center[0] - px, gt.center[1] - py
    S = config.search_range
    if not (-S <= dx < S and -S <= dy < S):
        return BinTarget(0, 0.0, 0, 0.0, 0.0, 0, 0.0, (0.0, 0.0, 0.0), ignore=True)

    bin_x, res_x = _encode_axis(dx, config)
    bin_y, res_y = _encode_axis(dy, config)
    bin_angle, res_angle = _encode_angle(gt.yaw, config)
    res_size = tuple(math.log(s / m) for s, m in zip(gt.size, config.mean_size))
    return BinTarget(bin_x, res_x, bin_y, res_y, gt.center[2] - pz, bin_angle, res_angle, res_size)


def decode_bin_targets(
    proposal_center: Sequence[float],
    encoded: BinTarget,
    config: BinConfig | None = None,
    mean_size: Sequence[float] | None = None,
) -> OrientedBox3D:
    config = config or BinConfig()
    mean = tuple(mean_size) if mean_size is not None else config.mean_size
    if encoded.ignore:
        raise ValidationError("cannot decode an ignored target")
    for name, value, limit in (
        ("bin_x", encoded.bin_x, config.num_bins),
        ("bin_y", encoded.bin_y, config.num_bins),
        ("bin_angle", encoded.bin_angle, config.num_angle_bins),
    ):
        if not 0 <= value < limit:
            raise ValidationError(f"{name}={value} outside [0, {limit})")

    px, py, pz = (float(v) for v in proposal_center)
    S, d = config.search_range, config.bin_size
    x = px + (encoded.bin_x + 0.5 + encoded.res_x) * d - S
    y = py + (encoded.bin_y + 0.5 + encoded.res_y) * d - S
    apc = config.angle_per_bin
    yaw = normalize_angle((encoded.bin_angle + 0.5 + encoded.res_angle) * apc - apc / 2.0)
    size = tuple(m * math.exp(r) for m, r in zip(mean, encoded.res_size))
    return OrientedBox3D((x, y, pz + encoded.res_z), size, yaw)


# ----------------------------------------------------------------------
# Batched containers
# ----------------------------------------------------------------------
@dataclass(frozen=True, slots=True)
class BinTargets:
    bin_x: np.ndarray
    res_x: np.ndarray
    bin_y: np.ndarray
    res_y: np.ndarray
    res_z: np.ndarray
    bin_angle: np.ndarray
    res_angle: np.ndarray
    res_size: np.ndarray
    ignore: np.ndarray

    def __len__(self) -> int:
        return int(self.bin_x.shape[0])

    @classmethod
    def stack(cls, targets: Iterable[BinTarget]) -> "BinTargets":
        items = list(targets)
        return cls(
            bin_x=np.array([t.bin_x for t in items], dtype=np.intp),
            res_x=np.array([t.res_x for t in items], dtype=np.float64),
            bin_y=np.array([t.bin_y for t in items], dtype=np.intp),
            res_y=np.array([t.res_y for t in items], dtype=np.float64),
            res_z=np.array([t.res_z for t in items], dtype=np.float64),
            bin_angle=np.array([t.bin_angle for t in items], dtype=np.intp),
            res_angle=np.array([t.res_angle for t in items], dtype=np.float64),
            res_size=np.array([t.res_size for t in items], dtype=np.float64).reshape(-1, 3),
            ignore=np.array([t.ignore for t in items], dtype=bool),
        )


@dataclass(frozen=True, slots=True)
class BinPredictions:
    """Bin probabilities plus one residual per bin, as emitted by a bin head."""

    prob_x: np.ndarray
    res_x: np.ndarray
    prob_y: np.ndarray
    res_y: np.ndarray
    res_z: np.ndarray
    prob_angle: np.ndarray
    res_angle: np.ndarray
    res_size: np.ndarray

    def __len__(self) -> int:
        return int(self.prob_x.shape[0])

    @classmethod
    def perfect(cls, targets: BinTargets, config: BinConfig | None = None) -> "BinPredictions":
        """One-hot probabilities and exact residuals reproducing the targets."""
        config = config or BinConfig()
        n = len(targets)
        rows = np.arange(n)

        def one_hot(bins: np.ndarray, width: int) -> np.ndarray:
            out = np.zeros((n, width))
            out[rows, bins] = 1.0
            return out

        def placed(values: np.ndarray, bins: np.ndarray, width: int) -> np.ndarray:
            out = np.zeros((n, width))
            out[rows, bins] = values
            return out

        nb, na = config.num_bins, config.num_angle_bins
        return cls(
            prob_x=one_hot(targets.bin_x, nb),
            res_x=placed(targets.res_x, targets.bin_x, nb),
            prob_y=one_hot(targets.bin_y, nb),
            res_y=placed(targets.res_y, targets.bin_y, nb),
            res_z=targets.res_z.copy(),
            prob_angle=one_hot(targets.bin_angle, na),
            res_angle=placed(targets.res_angle, targets.bin_angle, na),
            res_size=targets.res_size.copy(),
        )


def _point_terms(t: BinTargets, p: BinPredictions, i: int, beta: float) -> list[float]:
    bx, by, ba = int(t.bin_x[i]), int(t.bin_y[i]), int(t.bin_angle[i])
    terms = [
        cross_entropy(p.prob_x[i], bx),
        cross_entropy(p.prob_y[i], by),
        cross_entropy(p.prob_angle[i], ba),
        float(smooth_l1(p.res_x[i, bx] - t.res_x[i], beta)),
        float(smooth_l1(p.res_y[i, by] - t.res_y[i], beta)),
        float(smooth_l1(p.res_angle[i, ba] - t.res_angle[i], beta)),
        float(smooth_l1(p.res_z[i] - t.res_z[i], beta)),
    ]
    terms.extend(float(v) for v in np.atleast_1d(smooth_l1(p.res_size[i] - t.res_size[i], beta)))
    return terms


def bin_regression_loss(
    targets: BinTargets,
    predictions: BinPredictions,
    members: np.ndarray,
    beta: float = 1.0,
) -> float:
    """Mean over `members` of the summed bin cross-entropies and residual smooth-L1s."""
    rows = np.flatnonzero(np.asarray(members, dtype=bool))
    if rows.size == 0:
        return 0.0
    per_point = [math.fsum(_point_terms(targets, predictions, int(i), beta)) for i in rows]
    return math.fsum(per_point) / rows.size


@dataclass(frozen=True, slots=True)
class LossTerms:
    classification: float
    regression: float

    @property
    def total(self) -> float:
        return self.classification + self.regression


def rpn_loss(
    probs: np.ndarray,
    labels: np.ndarray,
    targets: BinTargets | None = None,
    predictions: BinPredictions | None = None,
    focal: FocalParams | None = None,
    beta: float = 1.0,
) -> LossTerms:
    """Stage-one loss: focal loss summed over all points, bin regression over foreground.

    `probs` are foreground probabilities; targets and predictions are aligned
    with the points and only foreground rows that are not ignored count.
    """
    focal = focal or FocalParams()
    p = np.clip(np.asarray(probs, dtype=np.float64), _FOCAL_EPS, 1.0 - _FOCAL_EPS)
    lab = np.asarray(labels).astype(bool)
    if p.shape != lab.shape:
        raise ValidationError(f"probabilities {p.shape} and labels {lab.shape} differ in shape")

    p_t = np.where(lab, p, 1.0 - p)
    alpha_t = np.where(lab, focal.alpha, 1.0 - focal.alpha)
    per_point = -alpha_t * (1.0 - p_t) ** focal.gamma * np.log(p_t)
    classification = math.fsum(per_point.tolist())

    regression = 0.0
    if targets is not None and predictions is not None:
        regression = bin_regression_loss(targets, predictions, lab & ~targets.ignore, beta)
    return LossTerms(classification, regression)


def refine_loss(
    probs: np.ndarray,
    labels: np.ndarray,
    targets: BinTargets | None = None,
    predictions: BinPredictions | None = None,
    positive: np.ndarray | None = None,
    beta: float = 1.0,
) -> LossTerms:
    """Stage-two loss: mean BCE over proposals O plus mean bin loss over positives R."""
    p = np.asarray(probs, dtype=np.float64)
    lab = np.asarray(labels).astype(bool)
    if p.size == 0:
        raise ValidationError("refinement loss needs at least one proposal")
    if p.shape != lab.shape:
        raise ValidationError(f"probabilities {p.shape} and labels {lab.shape} differ in shape")

    p_correct = np.maximum(np.where(lab, p, 1.0 - p), PROB_FLOOR)
    classification = math.fsum((-np.log(p_correct)).tolist()) / p.size

    regression = 0.0
    if targets is not None and predictions is not None:
        members = lab if positive is None else np.asarray(positive, dtype=bool)
        regression = bin_regression_loss(targets, predictions, members & ~targets.ignore, beta)
    return LossTerms(classification, regression)


# ----------------------------------------------------------------------
# Foreground set
# ----------------------------------------------------------------------
@dataclass(frozen=True, slots=True)
class ForegroundMask:
    indices: np.ndarray
    n_points: int

    def as_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_points, dtype=bool)
        mask[self.indices] = True
        return mask


def foreground_points(
    cloud: PointCloud,
    gts: Iterable[GroundTruth],
    sampled: np.ndarray | None = None,
) -> ForegroundMask:
    """Cloud indices lying inside any non-DontCare box, restricted to `sampled` when given."""
    inside = np.zeros(len(cloud), dtype=bool)
    for gt in gts:
        if gt.dont_care or gt.box is None:
            continue
        inside[points_in_box(cloud, gt.box)] = True
    if sampled is not None:
        pool = np.zeros(len(cloud), dtype=bool)
        chosen = np.asarray(sampled, dtype=np.intp)
        pool[chosen[chosen >= 0]] = True
        inside &= pool
    return ForegroundMask(np.flatnonzero(inside), len(cloud))
