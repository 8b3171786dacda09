"""Pretrained CNN backbones with a single linear regression output.

Backbones are split into ordered *modules*, the unit of the freeze policy:

* Xception: its 14 ``blockN`` groups.
* ResNet50: its 16 residual blocks (``conv2_block1`` .. ``conv5_block3``).
* DenseNet121: 4 dense blocks and 3 transitions, 7 groups.

Stem layers belong to the first module and trailing normalisation layers to
the last one.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "2")

import keras  # noqa: E402
import numpy as np  # noqa: E402

from cgvqa.media import PATCH_SIZE, Patch  # noqa: E402

CHECKPOINT_VERSION = 1
BACKBONES = ("DenseNet121", "ResNet50", "Xception")


class ModelError(Exception):
    pass


class WeightFetchError(ModelError):
    pass


class NumericalError(ModelError):
    pass


_RESNET_BLOCKS = [f"conv{s}_block{b}" for s, n in ((2, 3), (3, 4), (4, 6), (5, 3)) for b in range(1, n + 1)]
_DENSENET_GROUPS = ["conv2", "pool2", "conv3", "pool3", "conv4", "pool4", "conv5"]

MODULE_BOUNDARIES: dict[str, tuple[str, ...]] = {
    "Xception": tuple(f"block{i}" for i in range(1, 15)),
    "ResNet50": tuple(_RESNET_BLOCKS),
    "DenseNet121": tuple(_DENSENET_GROUPS),
}

_APPS = {
    "Xception": ("Xception", "xception"),
    "ResNet50": ("ResNet50", "resnet50"),
    "DenseNet121": ("DenseNet121", "densenet"),
}


def module_boundaries(backbone: str) -> tuple[str, ...]:
    try:
        return MODULE_BOUNDARIES[backbone]
    except KeyError:
        raise ModelError(f"unknown backbone {backbone!r}; expected one of {BACKBONES}") from None


def _named_module(backbone: str, name: str) -> int | None:
    """Module index of a layer from its name, or None if the name carries no module."""
    if backbone == "Xception":
        m = re.match(r"block(\d+)_", name)
        return int(m.group(1)) - 1 if m else None
    if backbone == "ResNet50":
        m = re.match(r"(conv\d_block\d+)_", name)
        if m:
            return _RESNET_BLOCKS.index(m.group(1))
        return 0 if re.match(r"(conv1|pool1)_", name) else None
    m = re.match(r"(conv\d|pool\d)_", name)
    if m and m.group(1) in _DENSENET_GROUPS:
        return _DENSENET_GROUPS.index(m.group(1))
    if re.match(r"(conv1|pool1|zero_padding2d)", name):
        return 0
    if name in ("bn", "relu"):
        return len(_DENSENET_GROUPS) - 1
    return None


def _merge_module(backbone: str, layer) -> int | None:
    """Module of an unnamed shortcut layer: walk forward to the merge it feeds."""
    frontier = [layer]
    seen = set()
    while frontier:
        cur = frontier.pop()
        if id(cur) in seen:
            continue
        seen.add(id(cur))
        for node in cur._outbound_nodes:
            op = node.operation
            inputs = [t._keras_history[0] for t in op._inbound_nodes[0].input_tensors]
            if len(inputs) > 1:
                for src in inputs:
                    idx = _named_module(backbone, src.name)
                    if idx is not None:
                        return idx
            frontier.append(op)
    return None


def layer_modules(backbone: str, base: keras.Model) -> dict[str, int]:
    """Map every weighted backbone layer name to its module index (0-based)."""
    mapping = {}
    for layer in base.layers:
        if not layer.weights:
            continue
        idx = _named_module(backbone, layer.name)
        if idx is None:
            idx = _merge_module(backbone, layer)
        if idx is None:
            raise ModelError(f"cannot assign layer {layer.name} of {backbone} to a module")
        mapping[layer.name] = idx
    return mapping


@dataclass(frozen=True)
class FreezePolicy:
    trainable_trailing_modules: int
    module_boundaries: tuple[str, ...]

    def __post_init__(self):
        if self.trainable_trailing_modules < 0:
            raise ModelError("number of trainable modules must be >= 0")
        if self.trainable_trailing_modules > len(self.module_boundaries):
            raise ModelError(
                f"cannot train {self.trainable_trailing_modules} modules, backbone has {len(self.module_boundaries)}"
            )

    def is_trainable(self, module_index: int) -> bool:
        return module_index >= len(self.module_boundaries) - self.trainable_trailing_modules


@dataclass(frozen=True)
class ModelSpec:
    backbone: str = "Xception"
    trainable_modules: int = 6
    pretrained: bool = True  # ImageNet weights; False gives a seeded random backbone
    seed: int = 0
    head_bias: float = 50.0
    head_init_scale: float = 0.01

    def __post_init__(self):
        module_boundaries(self.backbone)

    @property
    def freeze(self) -> FreezePolicy:
        return FreezePolicy(self.trainable_modules, module_boundaries(self.backbone))

    def with_modules(self, k: int) -> "ModelSpec":
        return ModelSpec(**{**asdict(self), "trainable_modules": k})


def normalize(pixels: np.ndarray, backbone: str) -> np.ndarray:
    """Apply the backbone's own ImageNet preprocessing to uint8 RGB pixels."""
    _, mod = _APPS[backbone]
    module = getattr(keras.applications, mod)
    return module.preprocess_input(np.asarray(pixels, dtype=np.float32).copy())


def _calibrate_batchnorm(base: keras.Model, seed: int, batch: int = 8) -> None:
    """Set BN moving statistics of a randomly initialised backbone from one noise batch.

    Without this, activations of an untrained deep backbone shrink to ~1e-5 and
    a regression head has nothing to work with.
    """
    bns = [l for l in base.layers if isinstance(l, keras.layers.BatchNormalization)]
    momenta = [l.momentum for l in bns]
    for l in bns:
        l.momentum = 0.0
    noise = np.random.default_rng(seed).uniform(-1, 1, (batch, *PATCH_SIZE, 3)).astype(np.float32)
    base(noise, training=True)
    for l, m in zip(bns, momenta):
        l.momentum = m


def _make_backbone(spec: ModelSpec) -> keras.Model:
    ctor = getattr(keras.applications, _APPS[spec.backbone][0])
    shape = (*PATCH_SIZE, 3)
    if not spec.pretrained:
        keras.utils.set_random_seed(spec.seed)
        base = ctor(include_top=False, weights=None, input_shape=shape, pooling="avg")
        _calibrate_batchnorm(base, spec.seed)
        return base
    from filelock import FileLock

    cache = Path(os.environ.get("KERAS_HOME", Path.home() / ".keras")) / "models"
    cache.mkdir(parents=True, exist_ok=True)
    with FileLock(str(cache / ".cgvqa-weights.lock")):
        try:
            return ctor(include_top=False, weights="imagenet", input_shape=shape, pooling="avg")
        except Exception as exc:  # keras surfaces fetch failures as assorted exception types
            raise WeightFetchError(f"could not load ImageNet weights for {spec.backbone}: {exc}") from exc


class QualityNet:
    """A backbone + global average pooling + one linear output unit."""

    def __init__(self, spec: ModelSpec, backbone: keras.Model, head: keras.layers.Dense, model: keras.Model):
        self.spec = spec
        self.backbone = backbone
        self.head = head
        self.model = model
        self.modules = layer_modules(spec.backbone, backbone)
        self.freeze = spec.freeze
        self.step = 0
        self._infer = None

    @property
    def module_count(self) -> int:
        return len(module_boundaries(self.spec.backbone))

    def module_layers(self, index: int) -> list:
        return [l for l in self.backbone.layers if self.modules.get(l.name) == index]

    def trainable_parameter_count(self) -> int:
        return int(sum(np.prod(v.shape) for v in self.model.trainable_variables))

    def trainable_modules(self) -> list[int]:
        return sorted({self.modules[l.name] for l in self.backbone.layers
                       if l.name in self.modules and l.trainable_weights})

    def __call__(self, x, training: bool = False):
        return self.model(x, training=training)

    def predict(self, pixels: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Scalar quality predictions for a batch of uint8 RGB patches."""
        pixels = np.asarray(pixels)
        if pixels.ndim == 3:
            pixels = pixels[None]
        if pixels.shape[1:] != (*PATCH_SIZE, 3):
            raise ModelError(f"expected patches of shape {(*PATCH_SIZE, 3)}, got {pixels.shape[1:]}")
        if self._infer is None:
            import tensorflow as tf

            # a traced graph frees activations as it goes; an eager functional call keeps all of them alive
            self._infer = tf.function(lambda x: self.model(x, training=False), reduce_retracing=True)
        out = []
        for i in range(0, len(pixels), batch_size):
            x = normalize(pixels[i:i + batch_size], self.spec.backbone)
            out.append(np.asarray(self._infer(x), dtype=np.float64)[:, 0])
        preds = np.concatenate(out) if out else np.zeros(0)
        if not np.all(np.isfinite(preds)):
            raise NumericalError("network produced non-finite output")
        return preds

    # -- weights -----------------------------------------------------------

    def weight_checksums(self) -> dict[str, str]:
        """sha256 over the weights of each module (``"module01"``...) and of the head."""
        sums = {}
        for i in range(self.module_count):
            h = hashlib.sha256()
            for layer in self.module_layers(i):
                for w in layer.weights:
                    h.update(np.asarray(w.numpy()).tobytes())
            sums[f"module{i + 1:02d}"] = h.hexdigest()
        h = hashlib.sha256()
        for w in self.head.weights:
            h.update(np.asarray(w.numpy()).tobytes())
        sums["head"] = h.hexdigest()
        return sums

    def get_weights(self) -> list[np.ndarray]:
        return [np.array(w) for w in self.model.get_weights()]

    def set_weights(self, weights: Sequence[np.ndarray]) -> None:
        self.model.set_weights(list(weights))

    def save_checkpoint(self, path: str | os.PathLike, extra: dict | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {"version": CHECKPOINT_VERSION, "spec": asdict(self.spec), "step": self.step, **(extra or {})}
        arrays = {f"w{i:04d}": w for i, w in enumerate(self.get_weights())}
        buf = io.BytesIO()
        np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(buf.getvalue())
        os.replace(tmp, path)
        return path


def apply_freeze(net: QualityNet, policy: FreezePolicy) -> QualityNet:
    """Make exactly the last ``k`` backbone modules and the head trainable."""
    expected = module_boundaries(net.spec.backbone)
    if tuple(policy.module_boundaries) != expected:
        raise ModelError(f"freeze policy modules do not match {net.spec.backbone}")
    for layer in net.backbone.layers:
        idx = net.modules.get(layer.name)
        layer.trainable = idx is not None and policy.is_trainable(idx)
    net.head.trainable = True
    net.freeze = policy
    return net


def build_model(spec: ModelSpec) -> QualityNet:
    backbone = _make_backbone(spec)
    head = keras.layers.Dense(
        1,
        activation=None,
        kernel_initializer=keras.initializers.RandomUniform(-spec.head_init_scale, spec.head_init_scale, seed=spec.seed),
        bias_initializer=keras.initializers.Constant(spec.head_bias),
        name="quality",
    )
    inputs = keras.Input((*PATCH_SIZE, 3), name="patch")
    # the nested flag alone does not survive an outer training=True call; the trainer also calls with training=False
    features = backbone(inputs, training=False)
    model = keras.Model(inputs, head(features), name=f"{spec.backbone.lower()}_quality")
    net = QualityNet(spec, backbone, head, model)
    return apply_freeze(net, spec.freeze)


def load_checkpoint(path: str | os.PathLike) -> tuple[QualityNet, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ModelError(f"checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
        weights = [data[k] for k in sorted(k for k in data.files if k.startswith("w"))]
    spec = ModelSpec(**meta["spec"])
    # weights are overwritten below, so skip any download
    net = build_model(ModelSpec(**{**asdict(spec), "pretrained": False}))
    net.spec = spec
    net.set_weights(weights)
    net.step = int(meta.get("step", 0))
    return net, meta


def predict_frame_quality(net: QualityNet, patch: Patch) -> float:
    """Predicted VMAF for one patch; unclipped."""
    value = float(net.predict(patch.pixels[None])[0])
    if not math.isfinite(value):
        raise NumericalError("non-finite prediction")
    return value
