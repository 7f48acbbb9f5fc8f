"""Supervision terms for scene fitting and BEV head training.

Every loss is a pure function returning its scalar value together with the
analytic gradient w.r.t. its prediction input, so callers can chain them into
the renderer's backward pass without any autodiff framework. Degenerate inputs
(no valid pixels, empty instance masks, zero-norm features) contribute fixed
values and are reported through ``flags`` rather than raised.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from .core import RenderOutput

DEPTH_LOG_FLOOR = 1e-3  # meters; clamp before taking logs


@dataclass(frozen=True)
class LossConfig:
    """Weights and hyperparameters for the training objectives.

    The four scene-fitting weights combine photometric, depth and feature
    supervision; the two BEV weights combine the segmentation head targets.
    """

    weight_depth_l1: float = 0.2
    weight_depth_silog: float = 0.8
    weight_feature: float = 0.1
    weight_center: float = 2.0
    weight_offset: float = 0.1
    focal_gamma: float = 2.0
    focal_alpha: float | None = 0.25

    def __post_init__(self):
        for name in ("weight_depth_l1", "weight_depth_silog", "weight_feature",
                     "weight_center", "weight_offset"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class LossTerm:
    value: float
    grad: np.ndarray
    flags: tuple[str, ...] = ()


def _stack(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64) if not isinstance(x, np.ndarray) else x
    return arr.astype(np.float64, copy=False)


def loss_render_mse(rendered, reference) -> LossTerm:
    """Mean over views of the per-view MSE across all pixels and channels."""
    pred, ref = _stack(rendered), _stack(reference)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    k = pred.shape[0]
    per_view = pred.reshape(k, -1) - ref.reshape(k, -1)
    value = float(np.mean(np.mean(per_view**2, axis=1)))
    grad = 2.0 * (pred - ref) / (k * per_view.shape[1])
    return LossTerm(value, grad)


def loss_depth_l1(pred, ref, valid) -> LossTerm:
    """Mean over views of the mean absolute depth error on valid pixels."""
    pred, ref = _stack(pred), _stack(ref)
    valid = np.asarray(valid, dtype=bool)
    k = pred.shape[0]
    grad = np.zeros_like(pred)
    value = 0.0
    flags = []
    for i in range(k):
        n = int(valid[i].sum())
        if n == 0:
            flags.append(f"view {i}: no valid depth pixels")
            continue
        diff = np.where(valid[i], pred[i] - ref[i], 0.0)
        value += float(np.sum(np.abs(diff))) / n
        grad[i] = np.sign(diff) / (k * n)
    return LossTerm(value / k, grad, tuple(flags))


def loss_depth_silog(pred, ref, valid) -> LossTerm:
    """Scale-invariant log-depth loss: per-view variance of log-depth errors.

    Depths are clamped to DEPTH_LOG_FLOOR before the log; a uniform rescaling
    of the prediction therefore leaves the loss unchanged.
    """
    pred, ref = _stack(pred), _stack(ref)
    valid = np.asarray(valid, dtype=bool)
    k = pred.shape[0]
    grad = np.zeros_like(pred)
    value = 0.0
    flags = []
    for i in range(k):
        n = int(valid[i].sum())
        if n == 0:
            flags.append(f"view {i}: no valid depth pixels")
            continue
        p = np.maximum(pred[i], DEPTH_LOG_FLOOR)
        r = np.maximum(ref[i], DEPTH_LOG_FLOOR)
        delta = np.where(valid[i], np.log(p) - np.log(r), 0.0)
        total = float(delta.sum())
        value += float(np.sum(delta**2)) / n - (total / n) ** 2
        ddelta = (2.0 * delta / n - 2.0 * total / n**2) / k
        grad[i] = np.where(valid[i] & (pred[i] > DEPTH_LOG_FLOOR), ddelta / p, 0.0)
    return LossTerm(value / k, grad, tuple(flags))


def loss_feature_cosine(pred, teacher) -> LossTerm:
    """Mean over views and pixels of (1 - cosine similarity) along channels.

    Pixels where either map has zero norm contribute cosine 0 (loss 1) with a
    zero gradient and are flagged.
    """
    pred, teacher = _stack(pred), _stack(teacher)
    if pred.shape != teacher.shape:
        raise ValueError(f"feature channel/shape mismatch {pred.shape} vs {teacher.shape}")
    k = pred.shape[0]
    n_px = int(np.prod(pred.shape[1:-1]))
    pn = np.linalg.norm(pred, axis=-1)
    tn = np.linalg.norm(teacher, axis=-1)
    ok = (pn > 0) & (tn > 0)
    flags = ()
    if not np.all(ok):
        flags = (f"{int((~ok).sum())} zero-norm feature pixels treated as cosine 0",)
    denom = np.where(ok, pn * tn, 1.0)
    cos = np.where(ok, np.sum(pred * teacher, axis=-1) / denom, 0.0)
    value = float(np.mean(1.0 - cos.reshape(k, -1).mean(axis=1)))
    scale = -1.0 / (k * n_px)
    dcos = (teacher / denom[..., None]
            - pred * (cos / np.where(ok, pn * pn, 1.0))[..., None])
    grad = np.where(ok[..., None], scale * dcos, 0.0)
    return LossTerm(value, grad, flags)


def loss_total(render_mse: float, depth_l1: float, depth_silog: float,
               feature_cos: float, config: LossConfig) -> float:
    """Weighted sum of the four scene-fitting terms."""
    parts = (render_mse, depth_l1, depth_silog, feature_cos)
    if not all(np.isfinite(parts)):
        raise ValueError(f"non-finite loss parts {parts}")
    return (render_mse + config.weight_depth_l1 * depth_l1
            + config.weight_depth_silog * depth_silog
            + config.weight_feature * feature_cos)


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    # log(sigmoid(x)) = -softplus(-x), computed without overflow
    return -np.logaddexp(0.0, -x)


def loss_focal(logits, targets, gamma: float = 2.0,
               alpha: float | None = 0.25) -> LossTerm:
    """Sigmoid focal loss, averaged over all pixels and classes.

    ``alpha=None`` disables class balancing (alpha_t = 1), reducing to plain
    sigmoid cross-entropy when gamma = 0.
    """
    x = _stack(logits)
    y = _stack(targets)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite logits")
    # pt = p for positives, 1-p for negatives; both via the stable log-sigmoid.
    sgn = 2.0 * y - 1.0
    log_pt = _log_sigmoid(sgn * x)
    pt = np.exp(log_pt)
    alpha_t = 1.0 if alpha is None else y * alpha + (1.0 - y) * (1.0 - alpha)
    one_m = 1.0 - pt
    value = float(np.mean(-alpha_t * one_m**gamma * log_pt))
    # d/dx, with pt(1-pt) folded in to avoid dividing by pt:
    #   -alpha_t * sgn * [ (1-pt)^(gamma+1) - gamma (1-pt)^gamma pt log pt ]
    focus = one_m**gamma
    inner = one_m * focus - (gamma * focus * pt * log_pt if gamma != 0 else 0.0)
    grad = -alpha_t * sgn * inner / x.size
    return LossTerm(value, grad)


def loss_center_l2(pred, target) -> LossTerm:
    """Mean squared error on the centerness map."""
    p, t = _stack(pred), _stack(target)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    diff = p - t
    return LossTerm(float(np.mean(diff**2)), 2.0 * diff / diff.size)


def loss_offset_l1(pred, target, mask) -> LossTerm:
    """Mean absolute offset error over pixels inside instance masks."""
    p, t = _stack(pred), _stack(target)
    m = np.asarray(mask, dtype=bool)
    if p.shape != t.shape or p.shape[:-1] != m.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape} / mask {m.shape}")
    n = int(m.sum())
    if n == 0:
        return LossTerm(0.0, np.zeros_like(p), ("empty instance mask",))
    diff = np.where(m[..., None], p - t, 0.0)
    denom = n * p.shape[-1]
    return LossTerm(float(np.sum(np.abs(diff))) / denom, np.sign(diff) / denom)


def loss_bev(focal: float, center: float, offset: float, config: LossConfig) -> float:
    """Weighted sum of the BEV head terms."""
    parts = (focal, center, offset)
    if not all(np.isfinite(parts)):
        raise ValueError(f"non-finite loss parts {parts}")
    return focal + config.weight_center * center + config.weight_offset * offset


@dataclass
class NormalizedDepth:
    """Alpha-normalized rendered depth restricted to well-covered pixels.

    Raw accumulated depth is biased low wherever coverage is partial, so depth
    losses see depth / alpha on pixels with alpha above the threshold, and
    their gradients are chained back onto both raw buffers here.
    """

    value: np.ndarray
    valid: np.ndarray
    _depth_raw: np.ndarray = field(repr=False, default=None)
    _alpha: np.ndarray = field(repr=False, default=None)

    @classmethod
    def from_render(cls, output: RenderOutput, alpha_min: float = 0.5) -> "NormalizedDepth":
        valid = output.alpha > alpha_min
        denom = np.where(valid, output.alpha, 1.0)
        return cls(value=np.where(valid, output.depth / denom, 0.0), valid=valid,
                   _depth_raw=output.depth, _alpha=output.alpha)

    def backprop(self, grad_normalized: np.ndarray):
        """Map a gradient on the normalized depth to (d_depth_raw, d_alpha)."""
        denom = np.where(self.valid, self._alpha, 1.0)
        g = np.where(self.valid, grad_normalized, 0.0)
        d_depth = g / denom
        d_alpha = -g * self._depth_raw / (denom * denom)
        return d_depth, np.where(self.valid, d_alpha, 0.0)
