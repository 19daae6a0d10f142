"""Planted long-range matching task and a small SGD trainer.

Each sample is an ``H x W x C`` noise map with two high-magnitude pixels
far apart. Both carry a marker on channel 0 plus a one-hot pattern on
channels ``1..n_patterns``; the label is 1 iff the two patterns match.
The classifier is linear after global average pooling, so without a
pairwise interaction between pixels the label is not linearly decodable:
only the attention block can supply it.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .analysis import DominanceReport, extract_map, key_dominance
from .autodiff import backward_arrays
from .blocks import AttentionConfig, EmbeddingSet, FeatureMap, _forward, init_embeddings
from .tensor import Rng

__all__ = [
    "ToyTask",
    "TrainingDiverged",
    "TrainResult",
    "ToyModel",
    "make_toy_task",
    "oracle_label",
    "train_toy",
    "history_csv",
    "evaluate",
    "trained_dominance",
]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class ToyTask:
    inputs: np.ndarray  # (N, HW, C)
    labels: np.ndarray  # (N,)
    positions: np.ndarray  # (N, 2) flattened pixel indices of the planted pair
    seed: int
    height: int
    width: int
    channels: int

    def __len__(self):
        return len(self.labels)

    def sample(self, i: int) -> tuple[FeatureMap, int]:
        return FeatureMap(self.height, self.width, self.inputs[i]), int(self.labels[i])


def make_toy_task(
    n_samples: int = 512,
    height: int = 8,
    width: int = 8,
    channels: int = 8,
    seed: int = 0,
    n_patterns: int | None = None,
    amplitude: float = 1.75,
    noise: float = 0.1,
) -> ToyTask:
    if n_patterns is None:
        n_patterns = min(4, channels - 1)
    if not 2 <= n_patterns <= channels - 1:
        raise ValueError("need 2 <= n_patterns <= channels - 1")
    rng = Rng(seed)
    n = height * width
    min_dist = max(height, width) / 2
    coords = np.array([(i // width, i % width) for i in range(n)], dtype=float)
    far = np.linalg.norm(coords[:, None] - coords[None], axis=-1) >= min_dist
    pairs = np.argwhere(np.triu(far))
    if len(pairs) == 0:
        raise ValueError(f"no pixel pair is {min_dist} apart on a {height}x{width} grid")

    inputs = rng.normal((n_samples, n, channels), noise)
    labels = np.zeros(n_samples, dtype=np.int64)
    positions = np.zeros((n_samples, 2), dtype=np.int64)
    for s in range(n_samples):
        a, b = pairs[rng.integers(0, len(pairs))]
        label = int(rng.integers(0, 2))
        pa = int(rng.integers(0, n_patterns))
        pb = pa if label else (pa + int(rng.integers(1, n_patterns))) % n_patterns
        for pos, pat in ((a, pa), (b, pb)):
            inputs[s, pos, 0] += amplitude
            inputs[s, pos, 1 + pat] += amplitude
        labels[s] = label
        positions[s] = (a, b)
    return ToyTask(inputs, labels, positions, seed, height, width, channels)


def oracle_label(values: np.ndarray, n_patterns: int) -> int:
    """Brute-force matcher: compare patterns of the two strongest pixels."""
    top = np.argsort(np.linalg.norm(values, axis=1))[-2:]
    pats = [int(np.argmax(values[p, 1 : 1 + n_patterns])) for p in top]
    return int(pats[0] == pats[1])


@dataclass
class ToyModel:
    """1x1 embedding -> attention block -> global average pool -> linear classifier."""

    w_in: np.ndarray
    block: EmbeddingSet
    w_cls: np.ndarray
    b_cls: np.ndarray

    @classmethod
    def init(cls, cfg: AttentionConfig, rng: Rng, n_classes: int = 2) -> "ToyModel":
        c = cfg.channels
        return cls(
            rng.normal((c, c), np.sqrt(2.0 / c)),
            init_embeddings(cfg, rng),
            rng.normal((c, n_classes), np.sqrt(1.0 / c)),
            np.zeros(n_classes),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {"w_in": self.w_in, **self.block.as_dict(), "w_cls": self.w_cls, "b_cls": self.b_cls}

    def with_params(self, p: dict) -> "ToyModel":
        block = EmbeddingSet(p["w_theta"], p["w_phi"], p["w_g"], p["w_out"])
        return ToyModel(p["w_in"], block, p["w_cls"], p["b_cls"])

    def logits(self, inputs: np.ndarray, cfg: AttentionConfig) -> np.ndarray:
        y, _ = _forward(inputs @ self.w_in, self.block, cfg)
        return y.mean(axis=-2) @ self.w_cls + self.b_cls

    def loss_and_grads(self, inputs, labels, cfg: AttentionConfig):
        b, n, _ = inputs.shape
        x = inputs @ self.w_in
        y, _ = _forward(x, self.block, cfg)
        pooled = y.mean(axis=-2)
        z = pooled @ self.w_cls + self.b_cls
        loss, acc, dz = _cross_entropy(z, labels)
        grads = {"w_cls": pooled.T @ dz, "b_cls": dz.sum(axis=0)}
        dy = np.broadcast_to((dz @ self.w_cls.T)[:, None, :] / n, y.shape)
        gb = backward_arrays(x, self.block, cfg, dy)
        grads.update({k: v for k, v in gb.as_dict().items() if k != "x"})
        c = inputs.shape[-1]
        grads["w_in"] = inputs.reshape(-1, c).T @ gb.d_x.reshape(-1, c)
        return loss, acc, grads


def _cross_entropy(z, labels):
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = len(labels)
    loss = -float(logp[np.arange(b), labels].mean())
    acc = float(np.mean(np.argmax(z, axis=1) == labels))
    dz = np.exp(logp)
    dz[np.arange(b), labels] -= 1.0
    return loss, acc, dz / b


def evaluate(model: ToyModel, task: ToyTask, cfg: AttentionConfig) -> tuple[float, float]:
    z = model.logits(task.inputs, cfg)
    loss, acc, _ = _cross_entropy(z, task.labels)
    return loss, acc


@dataclass
class TrainResult:
    initial_loss: float
    final_loss: float
    final_accuracy: float
    history: list = field(default_factory=list)
    initial: ToyModel | None = None
    model: ToyModel | None = None
    diverged: bool = False


def train_toy(
    cfg: AttentionConfig,
    task: ToyTask,
    steps: int = 2000,
    batch_size: int = 16,
    lr: float = 0.1,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    seed: int = 0,
    raise_on_divergence: bool = True,
) -> TrainResult:
    """SGD with momentum and weight decay; lr divided by 10 at 50% and 75% of ``steps``."""
    rng = Rng(seed)
    model = ToyModel.init(cfg, rng)
    initial = model
    params = {k: v.copy() for k, v in model.params().items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    init_loss, init_acc = evaluate(model, task, cfg)
    history = [{"epoch": 0, "step": 0, "lr": lr, "loss": init_loss, "accuracy": init_acc}]

    n = len(task)
    order = rng.integers(0, n, size=0)
    epoch, epoch_loss, epoch_acc, epoch_batches = 0, 0.0, 0.0, 0
    for step in range(1, steps + 1):
        if len(order) < batch_size:
            order = np.concatenate([order, np.argsort(rng.uniform(n))])
        idx, order = order[:batch_size], order[batch_size:]
        step_lr = lr * (0.1 ** ((step > steps // 2) + (step > (3 * steps) // 4)))
        loss, acc, grads = model.loss_and_grads(task.inputs[idx], task.labels[idx], cfg)
        if not np.isfinite(loss):
            if raise_on_divergence:
                raise TrainingDiverged(step, loss)
            return TrainResult(init_loss, float("nan"), float("nan"), history, initial, model, True)
        for k, p in params.items():
            velocity[k] = momentum * velocity[k] + grads[k] + weight_decay * p
            params[k] = p - step_lr * velocity[k]
        model = model.with_params(params)

        epoch_loss += loss
        epoch_acc += acc
        epoch_batches += 1
        if epoch_batches * batch_size >= n or step == steps:
            epoch += 1
            history.append({
                "epoch": epoch,
                "step": step,
                "lr": step_lr,
                "loss": epoch_loss / epoch_batches,
                "accuracy": epoch_acc / epoch_batches,
            })
            epoch_loss, epoch_acc, epoch_batches = 0.0, 0.0, 0

    final_loss, final_acc = evaluate(model, task, cfg)
    if not np.isfinite(final_loss):
        if raise_on_divergence:
            raise TrainingDiverged(steps, final_loss)
        return TrainResult(init_loss, final_loss, final_acc, history, initial, model, True)
    return TrainResult(init_loss, final_loss, final_acc, history, initial, model)


def trained_dominance(result: TrainResult, task: ToyTask, cfg: AttentionConfig, samples: int = 8) -> DominanceReport:
    """Mean key-dominance of the trained block's maps over the first ``samples`` inputs."""
    scores, variances = [], []
    for i in range(min(samples, len(task))):
        x = FeatureMap(task.height, task.width, task.inputs[i] @ result.model.w_in)
        rep = key_dominance(extract_map(x, result.model.block, cfg).head(0))
        scores.append(rep.key_dominance)
        variances.append(rep.per_key_query_variance)
    return DominanceReport(float(np.mean(scores)), np.mean(variances, axis=0), cfg.variant)


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["epoch", "step", "lr", "loss", "accuracy"], lineterminator="\n")
    w.writeheader()
    for row in history:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
