"""Cost-sensitive loss, Adam, the training loop and finite-difference gradient checks."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .metrics import ConfusionMatrix, MetricReport, accumulate, report
from .network import LayerGraph, forward
from .pipeline import DatasetStats, augment_flip, predict_image, subtract_mean, to_unit
from .tensor import Tensor
from .wavelet import daubechies_filters, dwt_pyramid

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-7


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass(frozen=True)
class LossParams:
    lambda_lane: float = 400.0
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not self.lambda_lane > 0:
            raise ValueError("lambda_lane must be positive")
        if not 0 < self.epsilon <= 1e-3:
            raise ValueError("epsilon must lie in (0, 1e-3]")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 1
    epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    lambda_lane: float = 400.0
    # 0 means every patch of the split once per epoch
    steps_per_epoch: int = 0
    augment: bool = True
    # learning rate falls linearly from lr to lr * final_lr_fraction over the run
    final_lr_fraction: float = 1.0

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0 or self.lambda_lane <= 0:
            raise ValueError("learning rate, eps and lambda_lane must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")
        if self.epochs < 0 or self.steps_per_epoch < 0:
            raise ValueError("epochs and steps_per_epoch must be non-negative")
        if not 0.0 <= self.final_lr_fraction <= 1.0:
            raise ValueError("final_lr_fraction must lie in [0, 1]")


# ---------------------------------------------------------------------------
# losses


def _check_labels(labels: np.ndarray, shape) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != tuple(shape):
        raise T.ShapeError(f"labels {labels.shape} do not match prediction extent {tuple(shape)}")
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 (background) or 1 (lane)")
    return labels.astype(bool)


def weighted_cross_entropy(probs: Tensor, labels, params: LossParams = LossParams()) -> Tensor:
    """-(1/N) (lambda * sum_{y=1} log p1 + sum_{y=0} log p0) over clamped class probabilities.

    With two softmax channels p0 = 1 - p1 exactly; reading p0 from its own channel
    avoids the cancellation in 1 - p1 when p1 is close to one.
    """
    lane = _check_labels(labels, probs.shape[1:])
    if probs.shape[0] != 2:
        raise T.ShapeError(f"weighted_cross_entropy: expected 2 channels, got {probs.shape[0]}")
    n = lane.size
    eps = params.epsilon
    # probability of each pixel's true class
    p = np.where(lane, probs.data[1], probs.data[0])
    pc = np.clip(p, eps, 1.0 - eps)
    lam = params.lambda_lane
    value = -(lam * np.log(pc[lane]).sum() + np.log(pc[~lane]).sum()) / n
    inside = (p > eps) & (p < 1.0 - eps)

    def backward(g: np.ndarray):
        dp = -np.where(lane, lam, 1.0) / pc / n * inside * g[0]
        gp = np.zeros(probs.shape, dtype=probs.dtype)
        gp[1] = np.where(lane, dp, 0)
        gp[0] = np.where(lane, 0, dp)
        return (gp,)

    return T._make(np.asarray(value, dtype=probs.dtype).reshape(1), "weighted_cross_entropy", (probs,), backward)


def cross_entropy(probs: Tensor, labels, epsilon: float = DEFAULT_EPSILON) -> Tensor:
    """Unweighted binary cross-entropy written out directly (no lambda path)."""
    lane = _check_labels(labels, probs.shape[1:]).astype(probs.dtype)
    p = np.clip(probs.data[1], epsilon, 1.0 - epsilon)
    value = -np.mean(lane * np.log(p) + (1.0 - lane) * np.log(1.0 - p))
    inside = (probs.data[1] > epsilon) & (probs.data[1] < 1.0 - epsilon)

    def backward(g: np.ndarray):
        gp = np.zeros(probs.shape, dtype=probs.dtype)
        gp[1] = g[0] * (-(lane / p) + (1.0 - lane) / (1.0 - p)) / lane.size * inside
        return (gp,)

    return T._make(np.asarray(value, dtype=probs.dtype).reshape(1), "cross_entropy", (probs,), backward)


def class_weighted_cross_entropy(probs: Tensor, labels, weights: Sequence[float], epsilon: float = DEFAULT_EPSILON) -> Tensor:
    """Multi-class form: -(1/N) sum_c w_c sum_{y=c} log p_c."""
    labels = np.asarray(labels)
    c = probs.shape[0]
    if len(weights) != c:
        raise ValueError(f"need one weight per class ({c}), got {len(weights)}")
    if labels.shape != probs.shape[1:] or labels.min() < 0 or labels.max() >= c:
        raise ValueError("labels must index the class axis and match the spatial extent")
    onehot = np.arange(c)[:, None, None] == labels[None]
    w = np.asarray(weights, dtype=probs.dtype)[:, None, None]
    pc = np.clip(probs.data, epsilon, 1.0 - epsilon)
    n = labels.size
    value = -(w * onehot * np.log(pc)).sum() / n
    inside = (probs.data > epsilon) & (probs.data < 1.0 - epsilon)

    def backward(g: np.ndarray):
        return (g[0] * (-(w * onehot) / pc / n) * inside,)

    return T._make(np.asarray(value, dtype=probs.dtype).reshape(1), "class_weighted_cross_entropy", (probs,), backward)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class Adam:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, config: TrainConfig) -> "Adam":
        return cls(config.lr, config.beta1, config.beta2, config.eps)

    def step(self, params: dict[str, Tensor]) -> None:
        missing = [k for k, p in params.items() if p.grad is None]
        if missing:
            raise ValueError(f"adam_step: parameters without gradients: {missing[:5]}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in params.items():
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)


def adam_step(params: dict[str, Tensor], optimizer: Adam) -> Adam:
    optimizer.step(params)
    return optimizer


# ---------------------------------------------------------------------------
# training loop


@dataclass
class Sample:
    """One training patch: raw 8-bit ``3 x H x W`` image and ``H x W`` 0/1 mask."""

    image: np.ndarray
    mask: np.ndarray


@dataclass
class EvalImage:
    image: np.ndarray
    mask: np.ndarray
    name: str = ""


@dataclass
class EpochLog:
    epoch: int
    steps: int
    mean_loss: float
    val: MetricReport | None = None


@dataclass
class TrainResult:
    graph: LayerGraph
    optimizer: Adam
    log: list[EpochLog]
    stats: DatasetStats


def prepare_input(image: np.ndarray, stats: DatasetStats, dtype=np.float32) -> np.ndarray:
    return subtract_mean(to_unit(image), stats).astype(dtype, copy=False)


def make_pyramid(graph: LayerGraph, x: np.ndarray):
    inj = graph.config.injection
    if not inj.levels:
        return None
    return dwt_pyramid(x, max(inj.levels), daubechies_filters(inj.order))


def sample_seed(root: int, purpose: int, *counters: int) -> int:
    """Seed for one random draw; ``purpose`` separates init/dropout/augmentation/order streams."""
    return int(np.random.SeedSequence(root, spawn_key=(purpose,) + tuple(counters)).generate_state(1)[0])


PURPOSE_INIT, PURPOSE_DROPOUT, PURPOSE_AUGMENT, PURPOSE_SCENE, PURPOSE_ORDER = range(5)


def train_step(graph: LayerGraph, opt: Adam, x: np.ndarray, mask: np.ndarray, loss_params: LossParams, seed: int) -> float:
    graph.zero_grad()
    logits = forward(graph, x, make_pyramid(graph, x), training=True, seed=seed)
    loss = weighted_cross_entropy(T.softmax_channels(logits), mask, loss_params)
    value = float(loss.data[0])
    if not math.isfinite(value):
        raise NumericalError(opt.step_count + 1, value)
    T.backward(loss)
    opt.step(graph.params)
    return value


def train(
    graph: LayerGraph,
    dataset: Sequence[Sample],
    config: TrainConfig,
    stats: DatasetStats,
    validation: Sequence[EvalImage] = (),
    patch: int = 256,
    stride: int = 250,
    optimizer: Adam | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train ``graph`` in place with Adam on batch-1 patches.

    Randomness (visit order, flips, dropout) is derived from ``config.seed``.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    opt = optimizer or Adam.from_config(config)
    loss_params = LossParams(config.lambda_lane)
    dtype = next(iter(graph.params.values())).dtype
    logs: list[EpochLog] = []
    per_epoch = config.steps_per_epoch or len(dataset)
    total = config.epochs * per_epoch
    done = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng(sample_seed(config.seed, PURPOSE_ORDER, epoch)).permutation(len(dataset))
        if config.steps_per_epoch:
            reps = -(-config.steps_per_epoch // len(dataset))
            order = np.concatenate(
                [np.random.default_rng(sample_seed(config.seed, PURPOSE_ORDER, epoch, r)).permutation(len(dataset)) for r in range(reps)]
            )[: config.steps_per_epoch]
        losses = []
        for i, idx in enumerate(order):
            s = dataset[int(idx)]
            img, mask = s.image, s.mask
            if config.augment:
                img, mask = augment_flip(img, mask, sample_seed(config.seed, PURPOSE_AUGMENT, epoch, i))
            x = prepare_input(img, stats, dtype)
            step_seed = sample_seed(config.seed, PURPOSE_DROPOUT, epoch, i)
            if config.final_lr_fraction != 1.0:
                opt.lr = config.lr * (1.0 - (1.0 - config.final_lr_fraction) * done / total)
            done += 1
            value = train_step(graph, opt, x, mask, loss_params, step_seed)
            losses.append(value)
            if on_step:
                on_step(opt.step_count, value)
        val = evaluate(graph, validation, stats, patch, stride).report if validation else None
        entry = EpochLog(epoch, len(losses), float(np.mean(losses)), val)
        log.info("epoch %d: loss %.5f%s", epoch, entry.mean_loss, f" val mIoU {val.mean_iou:.4f}" if val else "")
        logs.append(entry)
    return TrainResult(graph, opt, logs, stats)


# ---------------------------------------------------------------------------
# inference / evaluation


def patch_predictor(graph: LayerGraph, stats: DatasetStats) -> Callable[[np.ndarray], np.ndarray]:
    dtype = next(iter(graph.params.values())).dtype

    def predict(tile: np.ndarray) -> np.ndarray:
        x = prepare_input(tile, stats, dtype)
        with T.no_grad():
            return forward(graph, x, make_pyramid(graph, x), training=False).data

    return predict


def predict_full(graph: LayerGraph, image: np.ndarray, stats: DatasetStats, patch: int, stride: int, workers: int = 1):
    """(logits, mask) for a whole image via tiled inference."""
    return predict_image(image, patch_predictor(graph, stats), patch, stride, workers)


@dataclass
class Evaluation:
    report: MetricReport
    confusion: ConfusionMatrix
    per_image: list[tuple[str, MetricReport]]
    masks: list[np.ndarray]


def evaluate(
    graph: LayerGraph, images: Sequence[EvalImage], stats: DatasetStats, patch: int, stride: int, workers: int = 1
) -> Evaluation:
    total = ConfusionMatrix()
    per_image = []
    masks = []
    for item in images:
        _, pred = predict_full(graph, item.image, stats, patch, stride, workers)
        cm = accumulate(ConfusionMatrix(), pred, item.mask)
        total = total + cm
        per_image.append((item.name, report(cm)))
        masks.append(pred)
    return Evaluation(report(total), total, per_image, masks)


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    checked: dict[str, int]
    # coordinates skipped because a ReLU or max-pool switch fell inside +-h
    kinks: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def to_text(self) -> str:
        lines = [
            f"{k} = {v:.3e} ({self.checked[k]} entries, {self.kinks.get(k, 0)} kinks skipped)"
            for k, v in self.errors.items()
        ]
        lines.append(f"max = {self.max_error:.3e}")
        return "\n".join(lines) + "\n"


def relative_error(analytic: float, numeric: float, floor: float = 1e-7) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _switch_pattern(loss: Tensor) -> bytes:
    """Concatenated ReLU masks and max-pool argmaxes of a recorded graph."""
    parts = []
    for t in T._topo_order(loss):
        node = t.node
        if node is None:
            continue
        if node.op == "relu":
            parts.append(np.packbits(node.saved["mask"]).tobytes())
        elif node.op == "maxpool2d":
            parts.append(node.saved["argmax"].astype(np.uint8).tobytes())
    return b"".join(parts)


def grad_check(
    graph: LayerGraph,
    image: np.ndarray,
    mask: np.ndarray,
    loss_params: LossParams = LossParams(1.0),
    per_block: int = 4,
    h: float = 1e-4,
    seed: int = 0,
    training: bool = False,
    max_draws: int = 64,
) -> GradCheckReport:
    """Five-point central differences on a random subsample of every parameter block.

    ``image`` should already be preprocessed; the graph is promoted to float64.
    A coordinate whose +-h perturbation flips any ReLU or max-pool selection sits
    on a non-differentiable point and is replaced by another draw.
    """
    g64 = graph.astype(np.float64)
    x = np.asarray(image, dtype=np.float64)
    pyramid = make_pyramid(g64, x)

    def loss_value() -> Tensor:
        logits = forward(g64, x, pyramid, training=training, seed=seed)
        return weighted_cross_entropy(T.softmax_channels(logits), mask, loss_params)

    g64.zero_grad()
    base = loss_value()
    reference = _switch_pattern(base)
    T.backward(base)
    analytic = {k: p.grad.copy() for k, p in g64.params.items()}
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    checked: dict[str, int] = {}
    kinks: dict[str, int] = {}

    def probe(flat: np.ndarray, i: int, value: float) -> tuple[float, bool]:
        flat[i] = value
        out = loss_value()
        return float(out.data[0]), _switch_pattern(out) == reference

    for name, p in g64.params.items():
        flat = p.data.reshape(-1)
        order = rng.permutation(flat.size)[:max_draws]
        want = min(per_block, flat.size)
        worst, n_ok, n_kink = 0.0, 0, 0
        for i in order:
            if n_ok == want:
                break
            orig = flat[i]
            f = {}
            smooth = True
            for k in (-2, -1, 1, 2):
                f[k], same = probe(flat, i, orig + k * h)
                smooth &= same
            flat[i] = orig
            if not smooth:
                n_kink += 1
                continue
            numeric = (f[-2] - 8 * f[-1] + 8 * f[1] - f[2]) / (12 * h)
            worst = max(worst, relative_error(float(analytic[name].reshape(-1)[i]), numeric))
            n_ok += 1
        errors[name] = worst
        checked[name] = n_ok
        kinks[name] = n_kink
    g64.zero_grad()
    return GradCheckReport(errors, checked, kinks)
