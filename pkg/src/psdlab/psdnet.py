"""PSDNet: four conv blocks and three dense blocks regressing five percentages passing."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .dataset import DatasetManifest, load_pixels, minibatches
from .isotonic import project_psd
from .nn import (BatchNorm, Conv2D, Dense, Dropout, Flatten, MaxPool, Network, OptimizerState,
                 OutputLinear, ReLU, ShapeError, half_mse_loss, load_checkpoint, save_checkpoint,
                 sgdm_step)

N_OUTPUTS = 5
DROPOUT_BLOCKS = (2, 4)
# minibatch endpoints by input footprint (channels * height * width)
_BATCH_SMALL = (1 * 32 * 32, 256)
_BATCH_LARGE = (3 * 160 * 320, 8)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


def default_batch_size(height: int, view: str, mode: str) -> int:
    """256 for G32T falling linearly with input size to 8 for C160TU."""
    size = input_footprint(height, view, mode)
    (f0, b0), (f1, b1) = _BATCH_SMALL, _BATCH_LARGE
    frac = min(max((size - f0) / (f1 - f0), 0.0), 1.0)
    return int(math.floor(b0 + frac * (b1 - b0) + 0.5))


def input_footprint(height: int, view: str, mode: str) -> int:
    channels = 3 if mode == "C" else 1
    return channels * height * (2 * height if view == "TU" else height)


@dataclass
class PsdNetConfig:
    height: int = 32
    view: str = "T"
    mode: str = "G"
    filters: tuple | None = None
    kernel: int = 5
    fc_widths: tuple = (256, 128, 64)
    dropout: float = 0.2
    channel_dropout: bool = False
    epochs: int = 10
    batch_size: int | None = None
    lr: float = 1e-4
    momentum: float = 0.9
    seed: int = 0
    dtype: str = "float32"
    output_bias: str = "mean"
    init_scale: float = 1.0

    def __post_init__(self):
        if self.view not in ("T", "U", "TU", "STU"):
            raise ValueError(f"unknown view {self.view!r}")
        if self.mode not in ("G", "C"):
            raise ValueError(f"unknown color mode {self.mode!r}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd and positive")
        if self.filters is not None:
            self.filters = tuple(int(f) for f in self.filters)
            if len(self.filters) != 4 or min(self.filters) < 1:
                raise ValueError("filters must be four positive counts")
        self.fc_widths = tuple(int(w) for w in self.fc_widths)
        if self.output_bias not in ("zero", "mean"):
            raise ValueError("output_bias must be 'zero' or 'mean'")

    @property
    def conv_filters(self) -> tuple:
        s = self.height
        return self.filters if self.filters is not None else (s, 2 * s, 4 * s, 4 * s)

    @property
    def channels(self) -> int:
        return 3 if self.mode == "C" else 1

    @property
    def input_shape(self) -> tuple:
        width = 2 * self.height if self.view == "TU" else self.height
        return (self.channels, self.height, width)

    @property
    def padding(self) -> int:
        return (self.kernel - 1) // 2

    @property
    def resolved_batch_size(self) -> int:
        return self.batch_size or default_batch_size(self.height, self.view, self.mode)

    @property
    def name(self) -> str:
        return model_name(self.mode, self.height, self.view)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.conv_filters)
        d["fc_widths"] = list(self.fc_widths)
        d["batch_size"] = self.resolved_batch_size
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PsdNetConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def model_name(mode: str, height: int, view: str) -> str:
    """Color letter, image height, view tag, e.g. G128TU."""
    return f"{mode}{height}{view}"


def build(config: PsdNetConfig) -> Network:
    dtype = np.dtype(config.dtype)
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0x11]))
    layers = []
    c, h, w = config.input_shape
    for block, filters in enumerate(config.conv_filters, start=1):
        h2 = h + 2 * config.padding - config.kernel + 1
        w2 = w + 2 * config.padding - config.kernel + 1
        if min(h2, w2) < 3:
            raise ShapeError(f"conv block {block}: {h}x{w} feature map is too small to pool 3x3")
        layers += [Conv2D(c, filters, config.kernel, config.padding, 1, rng, dtype),
                   BatchNorm(filters, dtype), ReLU(), MaxPool(3, 2)]
        if block in DROPOUT_BLOCKS:
            layers.append(Dropout(config.dropout, config.channel_dropout, seed=_dropout_seed(config, block)))
        c, h, w = filters, (h2 - 3) // 2 + 1, (w2 - 3) // 2 + 1
    layers.append(Flatten())
    width = c * h * w
    for j, units in enumerate(config.fc_widths):
        layers += [Dense(width, units, rng, dtype), BatchNorm(units, dtype), ReLU(),
                   Dropout(config.dropout, seed=_dropout_seed(config, 10 + j))]
        width = units
    layers.append(OutputLinear(width, N_OUTPUTS, rng, dtype))
    if config.init_scale != 1.0:
        for layer in layers:
            if isinstance(layer, (Conv2D, Dense)) and not isinstance(layer, OutputLinear):
                layer.params["w"] *= dtype.type(config.init_scale)
    net = Network(layers, config.input_shape, dtype)
    net.shapes()
    return net


def _dropout_seed(config: PsdNetConfig, slot: int) -> int:
    return int(np.random.SeedSequence([int(config.seed), 0xD0, slot]).generate_state(1)[0])


def param_count(network: Network) -> int:
    return network.param_count()


@dataclass
class TrainingHistory:
    train_loss: list = field(default_factory=list)
    val_rmse: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    best_epoch: int | None = None  # 1-based; None when nothing was trained

    def __len__(self):
        return len(self.val_rmse)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_rmse", "seconds"])
        for i, (loss, rmse, sec) in enumerate(zip(self.train_loss, self.val_rmse, self.seconds), start=1):
            writer.writerow([i, repr(float(loss)), repr(float(rmse)), f"{sec:.3f}"])
        return buf.getvalue()


def _variant(manifest: DatasetManifest, config: PsdNetConfig) -> DatasetManifest:
    sub = manifest.select(view=config.view, size=config.height, mode=config.mode)
    if len(sub) == 0:
        raise ValueError(f"manifest has no {config.name} images")
    return sub


def _to_input(pixels: np.ndarray, dtype) -> np.ndarray:
    return pixels.astype(dtype) / dtype.type(255.0)


def rmse_all(pred, truth) -> float:
    diff = np.asarray(pred, dtype=float) - np.asarray(truth, dtype=float)
    return float(np.sqrt(np.mean(diff ** 2)))


def train(network: Network, manifest: DatasetManifest, config: PsdNetConfig,
          deterministic: bool = True, progress=None):
    """SGDM training; returns (network restored to its best validation epoch, history).

    A trailing minibatch of a single record is skipped since batch statistics
    are undefined for it. With ``deterministic`` the seconds column is zeroed
    so that histories of identical runs are byte-identical.
    """
    history = TrainingHistory()
    if config.epochs <= 0:
        return network, history
    data = _variant(manifest, config)
    train_idx = [i for i, r in enumerate(data.records) if r.split == "train"]
    val_idx = [i for i, r in enumerate(data.records) if r.split == "val"]
    if len(train_idx) < 2 or not val_idx:
        raise ValueError("training needs at least two train records and one val record")
    dtype = network.dtype
    pixels = load_pixels(data)
    labels = data.labels()
    x_val, y_val = pixels[val_idx], labels[val_idx]

    if config.output_bias == "mean":
        out = network.layers[-1]
        out.params["b"][...] = labels[train_idx].mean(axis=0)

    state = OptimizerState(lr=config.lr, momentum=config.momentum)
    params = network.named_params()
    best = None
    best_rmse = math.inf
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        plan = minibatches(data, config.resolved_batch_size, epoch, config.seed)
        total, count = 0.0, 0
        for batch in plan.batches():
            if len(batch) < 2:
                continue
            x = _to_input(pixels[batch], dtype)
            y = labels[batch].astype(dtype)
            pred = network.forward(x, train=True)
            loss, grad = half_mse_loss(pred, y)
            if not math.isfinite(loss):
                if best is not None:
                    network.load_state(best)
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch + 1}", history)
            network.backward(grad.astype(dtype))
            sgdm_step(params, network.named_grads(), state)
            total += loss * len(batch)
            count += len(batch)
        rmse = rmse_all(predict(network, _to_input(x_val, dtype)), y_val)
        if not math.isfinite(rmse):
            if best is not None:
                network.load_state(best)
            raise TrainingDiverged(f"validation RMSE became {rmse} in epoch {epoch + 1}", history)
        history.train_loss.append(total / max(count, 1))
        history.val_rmse.append(rmse)
        history.seconds.append(0.0 if deterministic else time.perf_counter() - t0)
        if rmse < best_rmse:
            best_rmse = rmse
            best = network.state()
            history.best_epoch = epoch + 1
        if progress is not None:
            progress(epoch + 1, history.train_loss[-1], rmse)
    network.load_state(best)
    return network, history


def predict(network: Network, images, project: bool = False, chunk: int = 256) -> np.ndarray:
    """Raw N x 5 outputs in percent; ``project`` repairs them to monotone curves in [0, 100]."""
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1:] != network.input_shape:
        raise ShapeError(f"images of shape {x.shape[1:]} do not fit a network expecting {network.input_shape}")
    out = np.concatenate([network.forward(x[i:i + chunk], train=False)
                          for i in range(0, len(x), chunk)]).astype(np.float64)
    return project_psd(out) if project else out


def predict_manifest(network: Network, manifest: DatasetManifest, config: PsdNetConfig,
                     split_name: str | None = "test", project: bool = False):
    """(predictions, truth, records) for one split of the matching image variant."""
    data = _variant(manifest, config)
    idx = [i for i, r in enumerate(data.records) if split_name is None or r.split == split_name]
    if not idx:
        raise ValueError(f"no {split_name} records for {config.name}")
    x = _to_input(load_pixels(data, idx), network.dtype)
    truth = data.labels()[idx]
    return predict(network, x, project), truth, [data.records[i] for i in idx]


def save_model(path, network: Network, config: PsdNetConfig, history: TrainingHistory | None = None) -> None:
    extra = {"model": config.name, "config": config.to_dict(), "version": __version__}
    if history is not None:
        extra["best_epoch"] = history.best_epoch
    save_checkpoint(path, network, extra)


def load_model(path) -> tuple[Network, PsdNetConfig]:
    network, extra = load_checkpoint(path)
    if "config" not in extra:
        raise ValueError(f"{path} carries no PSDNet config")
    return network, PsdNetConfig.from_dict(extra["config"])
