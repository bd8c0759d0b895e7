"""
Image-based four-class wealth classifier.

A small convolutional network in numpy: strided 3x3 convolutions, each followed
by batch normalization and ReLU, then fully-connected layers with dropout and a
softmax head over (poor, lower-middle, upper-middle, rich). Trained with Adam on
labels derived from the feature model's predictions.
"""

import base64
import json
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np
import numpy.typing as npt
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from povmap.errors import DataError

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.intp]

MODEL_FORMAT = "povmap-cnn"
MODEL_FORMAT_VERSION = 1
N_CLASSES = 4
CLASS_NAMES: tuple[str, ...] = ("poor", "lower-middle", "upper-middle", "rich")
LABEL_PERCENTILES: tuple[float, float, float] = (25.0, 50.0, 75.0)
MIN_LABEL_PLACES = 4
WARM_START_LEARNING_RATES: tuple[float, float] = (1e-6, 1e-4)
LOW_GROUP = "low"
HIGH_GROUP = "high"
_PREDICT_BATCH = 256


class CnnError(DataError):
    pass


class LabelError(CnnError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    channels: int
    kernel: int = 3
    stride: int = 2
    padding: int = 1


@dataclass(frozen=True)
class CnnSpec:
    """Architecture. ``fc`` lists hidden fully-connected widths; the head is added."""

    input_size: int = 64
    in_channels: int = 3
    conv: tuple[ConvSpec, ...] = (ConvSpec(8), ConvSpec(16), ConvSpec(32))
    fc: tuple[int, ...] = (64,)
    dropout: float = 0.5
    n_classes: int = N_CLASSES
    batch_norm: bool = True
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.n_classes != N_CLASSES:
            raise CnnError(f"Classifier head must have {N_CLASSES} outputs")
        if not 0.0 <= self.dropout < 1.0:
            raise CnnError(f"Dropout {self.dropout} not in [0, 1)")
        if self.flat_size() <= 0:
            raise CnnError("Convolution stack reduces the input to nothing")

    def conv_output_sizes(self) -> list[int]:
        sizes = []
        size = self.input_size
        for c in self.conv:
            size = (size + 2 * c.padding - c.kernel) // c.stride + 1
            sizes.append(size)
        return sizes

    def flat_size(self) -> int:
        sizes = self.conv_output_sizes()
        if not sizes:
            return self.input_size * self.input_size * self.in_channels
        return sizes[-1] * sizes[-1] * self.conv[-1].channels

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["conv"] = [asdict(c) for c in self.conv]
        data["fc"] = list(self.fc)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CnnSpec":
        values = dict(data)
        values["conv"] = tuple(ConvSpec(**c) for c in values.get("conv", []))
        values["fc"] = tuple(values.get("fc", []))
        return cls(**values)


@dataclass(frozen=True)
class CnnTrainConfig:
    """
    Training schedule. ``learning_rate`` drives the fully-connected ("high")
    group; ``low_learning_rate`` drives convolution and batch-norm parameters and
    defaults to ``learning_rate``.
    """

    learning_rate: float = 1e-4
    low_learning_rate: Optional[float] = None
    batch_size: int = 16
    epochs: int = 10
    max_steps: Optional[int] = None
    validation_fraction: float = 0.2
    patience: int = 2
    plateau_factor: float = 0.1
    min_learning_rate: float = 1e-9
    augment: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate < 0 or (self.low_learning_rate or 0.0) < 0:
            raise CnnError("Learning rates must be non-negative")
        if self.batch_size < 1:
            raise CnnError(f"Batch size must be >= 1, got {self.batch_size}")

    def group_rates(self) -> dict[str, float]:
        low = self.learning_rate if self.low_learning_rate is None else self.low_learning_rate
        return {LOW_GROUP: low, HIGH_GROUP: self.learning_rate}

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CnnTrainConfig":
        return cls(**dict(data))


def warm_start_config(config: CnnTrainConfig) -> CnnTrainConfig:
    low, high = WARM_START_LEARNING_RATES
    return replace(config, low_learning_rate=low, learning_rate=high)


@dataclass(frozen=True)
class ClassThresholds:
    """Cut points t1 < t2 < t3; class k covers [t_k, t_{k+1}) with open outer ends."""

    cuts: tuple[float, float, float]

    def __post_init__(self) -> None:
        a, b, c = self.cuts
        if not (a < b < c):
            raise LabelError(f"Class thresholds must be strictly increasing: {self.cuts}")

    def classify(self, values: Sequence[float] | FloatArray) -> IntArray:
        result: IntArray = np.searchsorted(
            np.asarray(self.cuts), np.asarray(values, dtype=np.float64), side="right"
        ).astype(np.intp)
        return result


@dataclass(frozen=True)
class LabelSet:
    labels: Mapping[str, int]
    thresholds: ClassThresholds
    degenerate: bool = False


def _strictly_increasing(cuts: Sequence[float]) -> tuple[float, float, float]:
    a = float(cuts[0])
    b = max(float(cuts[1]), float(np.nextafter(a, np.inf)))
    c = max(float(cuts[2]), float(np.nextafter(b, np.inf)))
    return a, b, c


def make_labels(
    predicted: Mapping[str, float], thresholds: Optional[ClassThresholds] = None
) -> LabelSet:
    """
    Class labels for predicted wealth values.

    Without explicit thresholds, cut points are the 25th/50th/75th percentiles of
    the predictions. Tied percentiles are nudged apart to the next floats; when
    all predictions are equal every place lands in one class and the set is
    flagged degenerate.
    """
    ids = sorted(predicted)
    values = np.array([float(predicted[pid]) for pid in ids], dtype=np.float64)
    degenerate = False
    if thresholds is None:
        if len(ids) < MIN_LABEL_PLACES:
            raise LabelError(
                f"Fitting class thresholds needs >= {MIN_LABEL_PLACES} places, got {len(ids)}"
            )
        cuts = np.percentile(values, LABEL_PERCENTILES)
        if values.min() == values.max():
            degenerate = True
            logger.warning("All predictions are equal; labels collapse to a single class")
        thresholds = ClassThresholds(_strictly_increasing(cuts.tolist()))
    classes = thresholds.classify(values)
    return LabelSet(
        labels={pid: int(c) for pid, c in zip(ids, classes)},
        thresholds=thresholds,
        degenerate=degenerate,
    )


@dataclass(frozen=True, eq=False)
class Tile:
    place_id: str
    pixels: FloatArray

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise CnnError(f"Tile {self.place_id}: expected HxWx3, got {self.pixels.shape}")
        if self.pixels.shape[0] != self.pixels.shape[1]:
            raise CnnError(f"Tile {self.place_id}: tiles must be square")
        finite = bool(np.isfinite(self.pixels).all())
        if not (finite and self.pixels.min() >= 0 and self.pixels.max() <= 1):
            raise CnnError(f"Tile {self.place_id}: pixel values outside [0, 1]")


def read_tile(path: Path, size: int, place_id: str = "") -> Tile:
    """Load a PNG (resized to ``size``) or a ``.npy`` HxWx3 tensor in [0, 1]."""
    source = Path(path)
    if source.suffix.lower() == ".npy":
        pixels = np.load(source).astype(np.float64)
    else:
        with Image.open(source) as image:
            rgb = image.convert("RGB")
            if rgb.size != (size, size):
                rgb = rgb.resize((size, size), Image.Resampling.BILINEAR)
            pixels = np.asarray(rgb, dtype=np.float64) / 255.0
    return Tile(place_id=place_id or source.stem, pixels=pixels)


def write_tile(tile: Tile, path: Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    data = np.clip(np.rint(tile.pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def read_tile_manifest(path: Path) -> dict[str, Path]:
    """``place_id,path`` rows; relative paths resolve against the manifest's folder."""
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if {"place_id", "path"} - set(frame.columns):
        raise CnnError(f"{path}: tile manifest needs place_id and path columns")
    base = Path(path).parent
    return {
        str(pid): (base / p if not Path(p).is_absolute() else Path(p))
        for pid, p in zip(frame["place_id"], frame["path"])
    }


def write_tile_manifest(paths: Mapping[str, Path], path: Path) -> None:
    base = Path(path).parent
    frame = pd.DataFrame(
        {
            "place_id": list(paths),
            "path": [str(Path(p).relative_to(base)) for p in paths.values()],
        }
    )
    frame.to_csv(path, index=False)


def _is_low(name: str) -> bool:
    return name.startswith(("conv", "bn"))


class CnnModel:
    """Architecture, learned parameters and batch-norm running statistics."""

    def __init__(
        self,
        spec: CnnSpec,
        params: dict[str, FloatArray],
        state: dict[str, FloatArray],
        thresholds: Optional[ClassThresholds] = None,
        train_config: Optional[CnnTrainConfig] = None,
    ) -> None:
        self.spec = spec
        self.params = params
        self.state = state
        self.thresholds = thresholds
        self.train_config = train_config
        self.history: list[float] = []

    def copy(self) -> "CnnModel":
        model = CnnModel(
            self.spec,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.state.items()},
            self.thresholds,
            self.train_config,
        )
        model.history = list(self.history)
        return model

    def param_groups(self) -> dict[str, str]:
        """Step-size group of every parameter: convolution/batch-norm low, dense high."""
        return {name: LOW_GROUP if _is_low(name) else HIGH_GROUP for name in self.params}

    def conv_names(self) -> list[str]:
        return [n for n in self.params if _is_low(n)] + list(self.state)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CnnModel):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.thresholds == other.thresholds
            and self.params.keys() == other.params.keys()
            and self.state.keys() == other.state.keys()
            and all(np.array_equal(v, other.params[k]) for k, v in self.params.items())
            and all(np.array_equal(v, other.state[k]) for k, v in self.state.items())
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_FORMAT_VERSION,
            "spec": self.spec.to_dict(),
            "train_config": self.train_config.to_dict() if self.train_config else None,
            "thresholds": list(self.thresholds.cuts) if self.thresholds else None,
            "params": {k: _encode(v) for k, v in sorted(self.params.items())},
            "state": {k: _encode(v) for k, v in sorted(self.state.items())},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CnnModel":
        if data.get("format") != MODEL_FORMAT:
            raise CnnError(f"Not a CNN model file (format {data.get('format')!r})")
        if data.get("version") != MODEL_FORMAT_VERSION:
            raise CnnError(f"Unsupported CNN model version {data.get('version')}")
        cuts = data.get("thresholds")
        config = data.get("train_config")
        return cls(
            spec=CnnSpec.from_dict(data["spec"]),
            params={k: _decode(v) for k, v in data["params"].items()},
            state={k: _decode(v) for k, v in data["state"].items()},
            thresholds=ClassThresholds(tuple(cuts)) if cuts else None,  # type: ignore[arg-type]
            train_config=CnnTrainConfig.from_dict(config) if config else None,
        )

    def save(self, path: Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path) -> "CnnModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _encode(array: FloatArray) -> dict[str, Any]:
    blob = np.ascontiguousarray(array, dtype="<f4").tobytes()
    return {"shape": list(array.shape), "data": base64.b64encode(blob).decode("ascii")}


def _decode(entry: Mapping[str, Any]) -> FloatArray:
    raw = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f4")
    return raw.astype(np.float64).reshape(tuple(entry["shape"]))


def _round_to_float32(model: CnnModel) -> None:
    for store in (model.params, model.state):
        for name in store:
            store[name] = store[name].astype(np.float32).astype(np.float64)


def init_model(spec: CnnSpec = CnnSpec(), seed: int = 0) -> CnnModel:
    """He-initialized network; biases zero, batch-norm scale one."""
    rng = np.random.default_rng(seed)
    params: dict[str, FloatArray] = {}
    state: dict[str, FloatArray] = {}
    in_ch = spec.in_channels
    for i, conv in enumerate(spec.conv):
        fan_in = in_ch * conv.kernel * conv.kernel
        params[f"conv{i}.w"] = rng.normal(
            0.0, math.sqrt(2.0 / fan_in), (conv.channels, in_ch, conv.kernel, conv.kernel)
        )
        params[f"conv{i}.b"] = np.zeros(conv.channels)
        if spec.batch_norm:
            params[f"bn{i}.gamma"] = np.ones(conv.channels)
            params[f"bn{i}.beta"] = np.zeros(conv.channels)
            state[f"bn{i}.mean"] = np.zeros(conv.channels)
            state[f"bn{i}.var"] = np.ones(conv.channels)
        in_ch = conv.channels
    params.update(_init_dense(spec, rng))
    model = CnnModel(spec, params, state)
    _round_to_float32(model)
    return model


def _init_dense(spec: CnnSpec, rng: np.random.Generator) -> dict[str, FloatArray]:
    params: dict[str, FloatArray] = {}
    width = spec.flat_size()
    for j, out in enumerate((*spec.fc, spec.n_classes)):
        params[f"fc{j}.w"] = rng.normal(0.0, math.sqrt(2.0 / width), (width, out))
        params[f"fc{j}.b"] = np.zeros(out)
        width = out
    return params


def warm_start(
    prev: CnnModel, new_head_widths: Optional[Sequence[int]] = None, seed: int = 0
) -> CnnModel:
    """
    New model sharing ``prev``'s convolution stack.

    Convolution and batch-norm parameters and running statistics are copied;
    fully-connected layers are re-initialized from ``seed``.
    """
    widths = tuple(prev.spec.fc if new_head_widths is None else new_head_widths)
    spec = replace(prev.spec, fc=widths)
    model = CnnModel(
        spec,
        {k: v.copy() for k, v in prev.params.items() if _is_low(k)},
        {k: v.copy() for k, v in prev.state.items()},
        prev.thresholds,
        prev.train_config,
    )
    model.params.update(_init_dense(spec, np.random.default_rng(seed)))
    for name in list(model.params):
        if not _is_low(name):
            model.params[name] = model.params[name].astype(np.float32).astype(np.float64)
    return model


def check_compatible(prev: CnnModel, spec: CnnSpec) -> None:
    if (prev.spec.input_size, prev.spec.in_channels, prev.spec.conv, prev.spec.batch_norm) != (
        spec.input_size,
        spec.in_channels,
        spec.conv,
        spec.batch_norm,
    ):
        raise CnnError("Convolution stack of the previous model does not match the spec")


def _conv_forward(
    x: FloatArray, w: FloatArray, b: FloatArray, stride: int, pad: int
) -> tuple[FloatArray, FloatArray]:
    n = x.shape[0]
    out_ch, in_ch, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, in_ch * k * k)
    out = cols @ w.reshape(out_ch, -1).T + b
    return out.reshape(n, ho, wo, out_ch).transpose(0, 3, 1, 2), cols


def _conv_backward(
    dout: FloatArray, x_shape: tuple[int, ...], cols: FloatArray, w: FloatArray,
    stride: int, pad: int,
) -> tuple[FloatArray, FloatArray, FloatArray]:
    n, c, h, wd = x_shape
    out_ch, _, k, _ = w.shape
    ho, wo = dout.shape[2], dout.shape[3]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, out_ch)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(out_ch, -1)).reshape(n, ho, wo, c, k, k)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return dxp[:, :, pad : pad + h, pad : pad + wd], dw, db


def _softmax(logits: FloatArray) -> FloatArray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    result: FloatArray = e / e.sum(axis=1, keepdims=True)
    return result


@dataclass
class _Trace:
    layers: list[Any] = field(default_factory=list)


def _forward(
    model: CnnModel,
    x: FloatArray,
    training: bool,
    rng: Optional[np.random.Generator] = None,
    trace: Optional[_Trace] = None,
) -> FloatArray:
    spec, p = model.spec, model.params
    h = x.transpose(0, 3, 1, 2)
    for i, conv in enumerate(spec.conv):
        x_shape = h.shape
        z, cols = _conv_forward(h, p[f"conv{i}.w"], p[f"conv{i}.b"], conv.stride, conv.padding)
        bn = None
        if spec.batch_norm:
            if training:
                mean = z.mean(axis=(0, 2, 3))
                var = z.var(axis=(0, 2, 3))
                m = spec.bn_momentum
                model.state[f"bn{i}.mean"] = m * model.state[f"bn{i}.mean"] + (1 - m) * mean
                model.state[f"bn{i}.var"] = m * model.state[f"bn{i}.var"] + (1 - m) * var
            else:
                mean = model.state[f"bn{i}.mean"]
                var = model.state[f"bn{i}.var"]
            inv_std = 1.0 / np.sqrt(var + spec.bn_eps)
            xhat = (z - mean[None, :, None, None]) * inv_std[None, :, None, None]
            gamma = p[f"bn{i}.gamma"][None, :, None, None]
            z = xhat * gamma + p[f"bn{i}.beta"][None, :, None, None]
            bn = (xhat, inv_std)
        mask = z > 0
        h = z * mask
        if trace is not None:
            trace.layers.append(("conv", i, x_shape, cols, bn, mask))

    flat = h.reshape(h.shape[0], -1)
    if trace is not None:
        trace.layers.append(("flatten", h.shape))
    for j in range(len(spec.fc)):
        inp = flat
        z = inp @ p[f"fc{j}.w"] + p[f"fc{j}.b"]
        mask = z > 0
        flat = z * mask
        keep = None
        if training and spec.dropout > 0:
            if rng is None:
                raise CnnError("Training forward pass with dropout needs an RNG")
            keep = (rng.random(flat.shape) >= spec.dropout) / (1.0 - spec.dropout)
            flat = flat * keep
        if trace is not None:
            trace.layers.append(("fc", j, inp, mask, keep))
    head = len(spec.fc)
    if trace is not None:
        trace.layers.append(("head", head, flat))
    logits: FloatArray = flat @ p[f"fc{head}.w"] + p[f"fc{head}.b"]
    return logits


def _backward(model: CnnModel, trace: _Trace, dlogits: FloatArray) -> dict[str, FloatArray]:
    spec, p = model.spec, model.params
    grads: dict[str, FloatArray] = {}
    d: FloatArray = dlogits
    for entry in reversed(trace.layers):
        kind = entry[0]
        if kind == "head":
            _, j, inp = entry
            grads[f"fc{j}.w"] = inp.T @ d
            grads[f"fc{j}.b"] = d.sum(axis=0)
            d = d @ p[f"fc{j}.w"].T
        elif kind == "fc":
            _, j, inp, mask, keep = entry
            if keep is not None:
                d = d * keep
            d = d * mask
            grads[f"fc{j}.w"] = inp.T @ d
            grads[f"fc{j}.b"] = d.sum(axis=0)
            d = d @ p[f"fc{j}.w"].T
        elif kind == "flatten":
            d = d.reshape(entry[1])
        else:
            _, i, x_shape, cols, bn, mask = entry
            conv = spec.conv[i]
            d = d * mask
            if bn is not None:
                xhat, inv_std = bn
                gamma = p[f"bn{i}.gamma"]
                grads[f"bn{i}.gamma"] = (d * xhat).sum(axis=(0, 2, 3))
                grads[f"bn{i}.beta"] = d.sum(axis=(0, 2, 3))
                dxhat = d * gamma[None, :, None, None]
                count = d.shape[0] * d.shape[2] * d.shape[3]
                d = (
                    inv_std[None, :, None, None]
                    / count
                    * (
                        count * dxhat
                        - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                    )
                )
            d, dw, db = _conv_backward(d, x_shape, cols, p[f"conv{i}.w"], conv.stride, conv.padding)
            grads[f"conv{i}.w"] = dw
            grads[f"conv{i}.b"] = db
    return grads


def _batch(model: CnnModel, tiles: FloatArray) -> FloatArray:
    x = np.asarray(tiles, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    size = model.spec.input_size
    if x.shape[1:] != (size, size, model.spec.in_channels):
        raise CnnError(
            f"Tile shape {x.shape[1:]} does not match {size}x{size}x{model.spec.in_channels}"
        )
    return x


def loss_and_gradients(
    model: CnnModel,
    tiles: FloatArray,
    labels: Sequence[int] | IntArray,
    rng: Optional[np.random.Generator] = None,
    training: bool = True,
) -> tuple[float, dict[str, FloatArray]]:
    """Mean softmax cross-entropy over the batch and its parameter gradients."""
    x = _batch(model, tiles)
    y = np.asarray(labels, dtype=np.intp)
    trace = _Trace()
    logits = _forward(model, x, training=training, rng=rng, trace=trace)
    probs = _softmax(logits)
    n = len(y)
    picked = probs[np.arange(n), y]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    return loss, _backward(model, trace, dlogits)


def forward(model: CnnModel, tile: FloatArray | Tile) -> FloatArray:
    """Class probabilities for one tile (or a batch), in inference mode."""
    pixels = tile.pixels if isinstance(tile, Tile) else tile
    x = _batch(model, pixels)
    probs = _softmax(_forward(model, x, training=False))
    return probs[0] if np.ndim(pixels) == 3 else probs


def predict_proba(model: CnnModel, tiles: Sequence[Tile]) -> FloatArray:
    if not tiles:
        return np.zeros((0, N_CLASSES))
    stack = np.stack([t.pixels for t in tiles])
    parts = [
        _softmax(_forward(model, _batch(model, stack[i : i + _PREDICT_BATCH]), training=False))
        for i in range(0, len(stack), _PREDICT_BATCH)
    ]
    return np.vstack(parts)


class Adam:
    """Adam with one step size per parameter group."""

    def __init__(self, model: CnnModel, config: CnnTrainConfig) -> None:
        self.config = config
        self.groups = model.param_groups()
        self.rates = config.group_rates()
        self.m = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.t = 0

    def step(self, model: CnnModel, grads: Mapping[str, FloatArray]) -> None:
        c = self.config
        self.t += 1
        bias1 = 1.0 - c.beta1**self.t
        bias2 = 1.0 - c.beta2**self.t
        for name, g in grads.items():
            self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
            rate = self.rates[self.groups[name]]
            if rate == 0.0:
                continue
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            model.params[name] = model.params[name] - rate * m_hat / (np.sqrt(v_hat) + c.adam_eps)

    def scale(self, factor: float, floor: float) -> None:
        self.rates = {g: max(floor, r * factor) for g, r in self.rates.items()}


def augment(x: FloatArray, rng: np.random.Generator) -> FloatArray:
    """Random multiples of 90 degree rotation and horizontal/vertical flips per tile."""
    out = np.empty_like(x)
    turns = rng.integers(0, 4, size=len(x))
    flips = rng.random((len(x), 2)) < 0.5
    for i in range(len(x)):
        tile = np.rot90(x[i], k=int(turns[i]), axes=(0, 1))
        if flips[i, 0]:
            tile = tile[:, ::-1]
        if flips[i, 1]:
            tile = tile[::-1, :]
        out[i] = tile
    return out


def train_step(
    model: CnnModel,
    optimizer: Adam,
    tiles: FloatArray,
    labels: Sequence[int] | IntArray,
    rng: np.random.Generator,
) -> float:
    loss, grads = loss_and_gradients(model, tiles, labels, rng=rng)
    if not math.isfinite(loss):
        raise CnnError(
            f"Non-finite training loss at step {optimizer.t + 1}; rates {optimizer.rates}"
        )
    optimizer.step(model, grads)
    return loss


def _eval_loss(model: CnnModel, x: FloatArray, y: IntArray) -> float:
    probs = _softmax(_forward(model, x, training=False))
    return float(-np.log(np.maximum(probs[np.arange(len(y)), y], 1e-300)).mean())


def train_cls(
    model: CnnModel,
    tiles: Sequence[Tile] | FloatArray,
    labels: Sequence[int] | IntArray,
    config: CnnTrainConfig,
) -> CnnModel:
    """
    Train a copy of ``model`` on labeled tiles.

    A seeded validation split (when large enough) drives the plateau scheduler;
    otherwise the epoch training loss does.
    """
    x = np.stack([t.pixels for t in tiles]) if not isinstance(tiles, np.ndarray) else tiles
    x = _batch(model, x)
    y = np.asarray(labels, dtype=np.intp)
    if len(x) == 0 or len(x) != len(y):
        raise CnnError(f"Need matching tiles and labels, got {len(x)} and {len(y)}")
    if y.min() < 0 or y.max() >= N_CLASSES:
        raise CnnError("Labels must be class indexes in [0, 4)")

    trained = model.copy()
    trained.train_config = config
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(x))
    n_val = int(math.ceil(config.validation_fraction * len(x))) if len(x) >= 10 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]

    optimizer = Adam(trained, config)
    best = math.inf
    stale = 0
    steps = 0
    for epoch in range(config.epochs):
        perm = train_idx[rng.permutation(len(train_idx))]
        losses = []
        for start in range(0, len(perm), config.batch_size):
            batch = perm[start : start + config.batch_size]
            xb = augment(x[batch], rng) if config.augment else x[batch]
            losses.append(train_step(trained, optimizer, xb, y[batch], rng))
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                break
        monitored = (
            _eval_loss(trained, x[val_idx], y[val_idx]) if n_val else float(np.mean(losses))
        )
        trained.history.append(monitored)
        if monitored < best:
            best, stale = monitored, 0
        else:
            stale += 1
            if stale > config.patience:
                optimizer.scale(config.plateau_factor, config.min_learning_rate)
                stale = 0
                logger.info(f"Epoch {epoch}: loss plateau, step sizes now {optimizer.rates}")
        logger.debug(f"Epoch {epoch}: monitored loss {monitored:.4f}")
        if config.max_steps is not None and steps >= config.max_steps:
            break

    _round_to_float32(trained)
    logger.info(f"Trained image classifier for {steps} steps on {len(train_idx)} tiles")
    return trained
