"""Fine-tuning loop: one freshly cropped patch per planned frame and epoch."""
from __future__ import annotations

import csv
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping, Protocol, Sequence

import numpy as np

from cgvqa import metrics
from cgvqa.media import CENTER, CropPolicy, rng_stream, sample_patch
from cgvqa.model import ModelSpec, QualityNet, build_model, normalize

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

Plan = Sequence[tuple[str, int]]
Labels = Mapping[tuple[str, int], float]


class TrainingError(Exception):
    pass


class MissingLabelError(TrainingError):
    pass


class DivergenceError(TrainingError):
    pass


class FrameSource(Protocol):
    def get(self, variant_id: str, frame_index: int) -> np.ndarray: ...
    def preload_plan(self, plan: Plan) -> None: ...


class Predictor(Protocol):
    def predict(self, pixels: np.ndarray, batch_size: int = ...) -> np.ndarray: ...


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    loss: str = "mse"
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    head_learning_rate: float | None = None  # None: same as learning_rate
    lr_schedule: str = "constant"  # or "cosine": decay both rates to 0 over the run
    seed: int = 0
    early_stop_patience: int = 5
    crop_policy: CropPolicy = field(default_factory=CropPolicy)
    workers: int = 1
    eval_batch_size: int = 16

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0 or (self.head_learning_rate is not None and self.head_learning_rate <= 0):
            raise ValueError("learning rates must be > 0")
        if self.loss != "mse":
            raise ValueError(f"unsupported loss {self.loss!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unsupported lr_schedule {self.lr_schedule!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if "crop_policy" in d and not isinstance(d["crop_policy"], CropPolicy):
            d["crop_policy"] = CropPolicy(str(d["crop_policy"]))
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_toml(cls, path: str | os.PathLike) -> "TrainConfig":
        with open(path, "rb") as f:
            data = tomllib.load(f)
        return cls.from_dict(data.get("train", data))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_policy"] = self.crop_policy.kind
        return d


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_rmse: float
    val_pcc: float


@dataclass
class TrainState:
    epoch: int = 0
    best_validation_rmse: float = math.inf
    best_epoch: int = 0
    history: list[EpochRecord] = field(default_factory=list)
    stopped_early: bool = False


@dataclass(frozen=True)
class ValidationScore:
    rmse: float
    pcc: float  # nan when undefined
    pcc_status: str = "ok"  # "undefined" when a predictor has zero variance


@dataclass
class TrainResult:
    checkpoint: Path | None
    state: TrainState
    net: QualityNet


def check_labels(plan: Plan, labels: Labels, what: str = "plan") -> None:
    missing = [key for key in plan if key not in labels]
    if missing:
        raise MissingLabelError(f"{len(missing)} {what} frames have no label, e.g. {missing[:3]}")


def predict_plan(
    net: Predictor, plan: Plan, labels: Labels, frames: FrameSource,
    crop_policy: CropPolicy = CENTER, batch_size: int = 16, seed: int = 0,
) -> metrics.PredictionSet:
    """Frame-level predictions for every planned frame, one patch per frame."""
    rng = rng_stream(seed, "predict")
    keys, preds = [], []
    for start in range(0, len(plan), batch_size):
        chunk = plan[start:start + batch_size]
        pixels = np.stack([sample_patch(frames.get(v, i), crop_policy, rng).pixels for v, i in chunk])
        preds.append(np.asarray(net.predict(pixels, batch_size=batch_size), dtype=np.float64))
        keys.extend(chunk)
    predicted = np.concatenate(preds) if preds else np.zeros(0)
    return metrics.PredictionSet.from_arrays(keys, predicted, [labels[k] for k in keys])


def evaluate_epoch(
    net: Predictor, plan: Plan, labels: Labels, frames: FrameSource,
    crop_policy: CropPolicy = CENTER, batch_size: int = 16,
) -> ValidationScore:
    """Frame-level RMSE and PCC on a validation plan (center crops by default)."""
    if not plan:
        raise ValueError("empty validation plan")
    check_labels(plan, labels, "validation")
    preds = predict_plan(net, plan, labels, frames, crop_policy, batch_size)
    err = metrics.rmse(preds.predicted, preds.label)
    try:
        return ValidationScore(err, metrics.pcc(preds.predicted, preds.label))
    except metrics.MetricError:
        return ValidationScore(err, math.nan, "undefined")


# -- optimisation --------------------------------------------------------------


def _optimizer(name: str, lr: float, schedule: str = "constant", total_steps: int | None = None):
    import keras

    if schedule == "cosine":
        if not total_steps:
            raise ValueError("a cosine schedule needs the total number of steps")
        lr = keras.optimizers.schedules.CosineDecay(lr, total_steps)
    if name == "adam":
        return keras.optimizers.Adam(lr)
    return keras.optimizers.SGD(lr)


class _Stepper:
    """Compiled MSE step; the head may use its own optimizer / learning rate."""

    def __init__(self, net: QualityNet, config: TrainConfig, total_steps: int | None = None):
        import tensorflow as tf

        self.net = net
        head_ids = {id(v) for v in net.head.trainable_variables}
        self.body_vars = [v for v in net.model.trainable_variables if id(v) not in head_ids]
        self.head_vars = list(net.head.trainable_variables)
        sched = (config.lr_schedule, total_steps)
        self.body_opt = _optimizer(config.optimizer, config.learning_rate, *sched) if self.body_vars else None
        self.head_opt = _optimizer(config.optimizer, config.head_learning_rate or config.learning_rate, *sched)
        model = net.model
        variables = self.body_vars + self.head_vars

        # Only the forward/backward pass is traced. A Keras optimizer applied inside a
        # tf.function pins the model's variables in the runtime after the net is gone
        # (about 150 MB per Xception), so updates run eagerly.
        @tf.function(reduce_retracing=True)
        def grads(x, y):
            with tf.GradientTape() as tape:
                # inference mode keeps BN on its moving statistics, so the loss is the one predict() sees
                pred = model(x, training=False)[:, 0]
                loss = tf.reduce_mean(tf.square(pred - y))
            return loss, tape.gradient(loss, variables)

        self._grads = grads

    def __call__(self, pixels: np.ndarray, targets: np.ndarray) -> float:
        x = normalize(pixels, self.net.spec.backbone)
        loss, grads = self._grads(x, np.asarray(targets, dtype=np.float32))
        n_body = len(self.body_vars)
        if n_body:
            self.body_opt.apply_gradients(zip(grads[:n_body], self.body_vars))
        self.head_opt.apply_gradients(zip(grads[n_body:], self.head_vars))
        self.net.step += 1
        return float(loss)


def make_train_step(net: QualityNet, config: TrainConfig, total_steps: int | None = None):
    """A callable ``(uint8 patches, targets) -> batch loss`` that updates ``net``."""
    return _Stepper(net, config, total_steps)


def _epoch_batches(
    plan: Plan, labels: Labels, frames: FrameSource, config: TrainConfig, epoch: int,
) -> Iterator[tuple[np.ndarray, np.ndarray, list[tuple[int, int]]]]:
    """Shuffled batches of fresh crops.  Batch ``b`` is cut by worker ``b % workers``
    from that worker's own (seed, worker, epoch) stream, so output does not depend
    on thread timing."""
    order = rng_stream(config.seed, "shuffle", epoch).permutation(len(plan))
    batches = [order[i:i + config.batch_size] for i in range(0, len(order), config.batch_size)]
    streams = [rng_stream(config.seed, "worker", w, "epoch", epoch) for w in range(config.workers)]

    def make(b: int):
        rng = streams[b % config.workers]
        patches, origins = [], []
        for j in batches[b]:
            vid, idx = plan[j]
            p = sample_patch(frames.get(vid, idx), config.crop_policy, rng)
            patches.append(p.pixels)
            origins.append(p.origin)
        targets = np.array([labels[plan[j]] for j in batches[b]], dtype=np.float32)
        return np.stack(patches), targets, origins

    if config.workers == 1:
        for b in range(len(batches)):
            yield make(b)
        return
    # one single-thread lane per worker keeps each stream's consumption order fixed
    lanes = [ThreadPoolExecutor(1) for _ in range(config.workers)]
    window = 2 * config.workers
    try:
        pending = {}
        for b in range(min(window, len(batches))):
            pending[b] = lanes[b % config.workers].submit(make, b)
        for b in range(len(batches)):
            nxt = b + window
            if nxt < len(batches):
                pending[nxt] = lanes[nxt % config.workers].submit(make, nxt)
            yield pending.pop(b).result()
    finally:
        for lane in lanes:
            lane.shutdown(cancel_futures=True)


def write_history(history: Sequence[EpochRecord], path: str | os.PathLike) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_rmse", "val_pcc"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_rmse), repr(r.val_pcc)])
    return path


def train(
    spec: ModelSpec,
    plan: Plan,
    labels: Labels,
    config: TrainConfig,
    frames: FrameSource,
    *,
    validation_plan: Plan | None = None,
    out_dir: str | os.PathLike | None = None,
    net: QualityNet | None = None,
    on_batch=None,
) -> TrainResult:
    """Fine-tune ``spec`` on ``plan``.

    The best checkpoint (lowest validation RMSE, or the last epoch without a
    validation plan) is written to ``out_dir/best.npz`` together with
    ``history.csv``.  ``on_batch(epoch, origins)`` is an optional hook that
    sees the crop origins of each batch.
    """
    if not plan:
        raise TrainingError("empty training plan")
    check_labels(plan, labels, "training")
    if validation_plan:
        check_labels(validation_plan, labels, "validation")

    import keras
    import tensorflow as tf

    tf.config.experimental.enable_op_determinism()
    if net is None:
        net = build_model(spec)
    keras.utils.set_random_seed(config.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    state = TrainState()
    meta = {"train_config": config.to_dict(), "train_frames": len(plan)}
    best_path = out / "best.npz" if out else None
    if config.epochs == 0:
        if best_path:
            net.save_checkpoint(best_path, {**meta, "epoch": 0})
            write_history([], out / "history.csv")
        return TrainResult(best_path, state, net)

    frames.preload_plan(plan)
    if validation_plan:
        frames.preload_plan(validation_plan)
    stepper = make_train_step(net, config, config.epochs * math.ceil(len(plan) / config.batch_size))
    best_weights = None
    stale = 0
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        for pixels, targets, origins in _epoch_batches(plan, labels, frames, config, epoch):
            loss = stepper(pixels, targets)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {net.step}")
            total += loss * len(targets)
            count += len(targets)
            if on_batch is not None:
                on_batch(epoch, origins)
        train_loss = total / count
        if validation_plan:
            score = evaluate_epoch(net, validation_plan, labels, frames, CENTER, config.eval_batch_size)
        else:
            score = ValidationScore(math.nan, math.nan, "no_validation")
        state.history.append(EpochRecord(epoch, train_loss, score.rmse, score.pcc))
        state.epoch = epoch
        log.info("epoch %d: train_rmse=%.3f val_rmse=%.3f val_pcc=%.4f",
                 epoch, math.sqrt(train_loss), score.rmse, score.pcc)

        improved = validation_plan and score.rmse < state.best_validation_rmse
        if improved or not validation_plan:
            if validation_plan:
                state.best_validation_rmse = score.rmse
            state.best_epoch = epoch
            best_weights = net.get_weights()
            stale = 0
            if best_path:
                net.save_checkpoint(best_path, {**meta, "epoch": epoch})
        else:
            stale += 1
            if config.early_stop_patience and stale >= config.early_stop_patience:
                state.stopped_early = True
                break
        if out is not None:
            write_history(state.history, out / "history.csv")

    if out is not None:
        net.save_checkpoint(out / "last.npz", {**meta, "epoch": state.epoch})
        write_history(state.history, out / "history.csv")
    if validation_plan and best_weights is not None:
        net.set_weights(best_weights)
    return TrainResult(best_path, state, net)
