"""Training and inference of the calibration heads.

The regressor head predicts the normal-score statistics of an image's
(implicit) class directly from its feature tensor; the classifier head
predicts a class id that selects fitted per-class statistics instead.
Either way the anomaly map is then mean-max normalized with the chosen
statistics.

Regression targets are each image's own (mean, max) or (mean, std) pixel
scores; targets are z-normalized per training run so the smooth-L1
threshold alpha is independent of the base scorer's scale. Input features
are standardized per channel over the training set for the same reason
(the fixed learning rate must not depend on the feature scale). Both sets
of constants travel with the checkpoint.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import net
from .align import ClassStats, ScoreMap, normalize_meanmax, normalize_meanstd
from .tensorio import read_tensor, write_tensor

STRUCTURES = {
    "1lin": (0, 1),
    "2lin": (0, 2),
    "3lin": (0, 3),
    "1conv+2lin": (1, 2),
    "2conv+2lin": (2, 2),
}


@dataclass
class ImageStats:
    """One image's own pixel-score statistics (regression targets)."""

    u: float
    gamma: float
    sigma: float


def compute_image_stats(values: np.ndarray) -> ImageStats:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("empty score map")
    return ImageStats(u=float(np.mean(v)), gamma=float(np.max(v)), sigma=float(np.std(v)))


@dataclass
class HeadConfig:
    mode: str = "regressor"          # "regressor" | "classifier"
    n_conv: int = 1
    n_linear: int = 2
    hidden_dim: int = 256
    dropout_rate: float = 0.25
    activation: str = "gelu"         # "gelu" | "relu"
    target: str = "meanmax"          # "meanmax" | "meanstd" (regressor only)
    alpha: float = 0.1               # smooth-L1 threshold, normalized target space
    out_dim: int = 2                 # 2 for regressor, k for classifier

    def validate(self):
        if self.mode not in ("regressor", "classifier"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "regressor" and self.out_dim != 2:
            raise ValueError("regressor head must have out_dim 2")
        if self.mode == "classifier" and self.out_dim < 2:
            raise ValueError("classifier head needs out_dim >= 2 (k=1 is degenerate)")
        if self.n_conv not in (0, 1, 2):
            raise ValueError(f"n_conv must be 0, 1, or 2, got {self.n_conv}")
        if self.n_linear not in (1, 2, 3):
            raise ValueError(f"n_linear must be 1, 2, or 3, got {self.n_linear}")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.target not in ("meanmax", "meanstd"):
            raise ValueError(f"unknown target {self.target!r}")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")


@dataclass
class TrainConfig:
    lr: float = 5e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    iterations: int = 5000
    seed: int = 0
    # global gradient-norm clip; the fixed lr/momentum overshoots on
    # low-dimensional inputs without it. 0 disables.
    grad_clip: float = 1.0
    # fraction of final iterations whose parameters are averaged into the
    # returned model; suppresses the constant-lr SGD noise floor. 0 disables.
    avg_frac: float = 0.25


def _clip_gradients(params, max_norm: float) -> None:
    if max_norm <= 0:
        return
    total = math.sqrt(sum(float(np.sum(p.grad**2)) for p in params))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad *= scale


class _TailAverager:
    """Running mean of parameter values over the last avg_frac of training."""

    def __init__(self, iterations: int, avg_frac: float):
        self.start = iterations - int(avg_frac * iterations) if avg_frac > 0 else iterations
        self.sums = None
        self.count = 0

    def update(self, it: int, params) -> None:
        if it < self.start:
            return
        if self.sums is None:
            self.sums = [p.value.copy() for p in params]
        else:
            for s, p in zip(self.sums, params):
                s += p.value
        self.count += 1

    def finalize(self, params) -> None:
        if self.count:
            for s, p in zip(self.sums, params):
                p.value[...] = s / self.count


def build_head(cfg: HeadConfig, in_channels: int, rng) -> net.Network:
    """Assemble the layer stack: n_conv 3x3 convs (channel-preserving, each
    followed by the activation), global average pooling, then n_linear
    linears with dropout before every linear.

    The first linear's dropout sits ahead of the pooling so the injected
    noise is spatial (random grid locations zeroed, mimicking local
    corruptions); channel dropout on the narrow pooled vector would
    destroy the class signature instead of perturbing it.
    """
    cfg.validate()
    act = net.GELU if cfg.activation == "gelu" else net.ReLU
    layers: list[net.Layer] = []
    for _ in range(cfg.n_conv):
        layers.append(net.Conv3x3(in_channels, in_channels, rng))
        layers.append(act())
    layers.append(net.Dropout(cfg.dropout_rate))
    layers.append(net.GlobalAvgPool())
    dim = in_channels
    for i in range(cfg.n_linear):
        last = i == cfg.n_linear - 1
        out = cfg.out_dim if last else cfg.hidden_dim
        if i > 0:
            layers.append(net.Dropout(cfg.dropout_rate))
        layers.append(net.Linear(dim, out, rng))
        if not last:
            layers.append(act())
        dim = out
    return net.Network(layers)


@dataclass
class HeadModel:
    config: HeadConfig
    in_channels: int
    network: net.Network
    seed: int
    # affine de-normalization applied to regressor outputs (identity for classifier)
    target_offset: np.ndarray = None
    target_scale: np.ndarray = None
    # per-channel feature standardization fitted on the training set
    input_offset: np.ndarray = None
    input_scale: np.ndarray = None
    loss_trace: list = field(default_factory=list)
    holdout_accuracy: Optional[float] = None


def _fit_input_norm(features: Mapping[str, np.ndarray], ids: Sequence[str]):
    """Per-channel mean/std over all locations of all training images."""
    total = None
    total_sq = None
    count = 0
    for image_id in ids:
        f = np.asarray(features[image_id], dtype=np.float64)
        s = f.sum(axis=(1, 2))
        sq = (f**2).sum(axis=(1, 2))
        total = s if total is None else total + s
        total_sq = sq if total_sq is None else total_sq + sq
        count += f.shape[1] * f.shape[2]
    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 0.0)
    return mean, np.maximum(np.sqrt(var), 1e-8)


def _stack_features(
    features: Mapping[str, np.ndarray],
    ids: Sequence[str],
    offset: np.ndarray,
    scale: np.ndarray,
) -> np.ndarray:
    x = np.stack([np.asarray(features[i], dtype=np.float64) for i in ids])
    return (x - offset[None, :, None, None]) / scale[None, :, None, None]


def train_regressor(
    features: Mapping[str, np.ndarray],
    score_maps: Mapping[str, np.ndarray],
    head_cfg: HeadConfig,
    train_cfg: TrainConfig,
) -> HeadModel:
    """Train the statistics regressor on normal training images.

    Targets are (u_img, gamma_img) for the meanmax variant or
    (u_img, sigma_img) for the meanstd variant; dropout is active
    throughout training as the pseudo-anomaly noise source.
    """
    head_cfg.validate()
    if head_cfg.mode != "regressor":
        raise ValueError("train_regressor needs a regressor-mode config")
    ids = sorted(features)
    if not ids:
        raise ValueError("empty training set")
    missing = [i for i in ids if i not in score_maps]
    if missing:
        raise ValueError(f"missing score maps for {missing[:5]}")

    targets = np.empty((len(ids), 2))
    for row, image_id in enumerate(ids):
        st = compute_image_stats(score_maps[image_id])
        targets[row] = (st.u, st.gamma) if head_cfg.target == "meanmax" else (st.u, st.sigma)
    t_offset = targets.mean(axis=0)
    t_scale = np.maximum(targets.std(axis=0), 1e-8)
    targets_n = (targets - t_offset) / t_scale

    in_channels = int(np.asarray(features[ids[0]]).shape[0])
    in_offset, in_scale = _fit_input_norm(features, ids)
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed]))
    network = build_head(head_cfg, in_channels, rng)
    optim = net.SGD(train_cfg.lr, train_cfg.momentum, train_cfg.weight_decay)

    model = HeadModel(
        config=head_cfg,
        in_channels=in_channels,
        network=network,
        seed=train_cfg.seed,
        target_offset=t_offset,
        target_scale=t_scale,
        input_offset=in_offset,
        input_scale=in_scale,
    )
    params = network.parameters()
    averager = _TailAverager(train_cfg.iterations, train_cfg.avg_frac)
    for it in range(train_cfg.iterations):
        idx = rng.integers(0, len(ids), size=train_cfg.batch_size)
        x = _stack_features(features, [ids[i] for i in idx], in_offset, in_scale)
        out = network.forward(x, mode="train", rng=rng)
        loss_elems, grad = net.smooth_l1(out, targets_n[idx], head_cfg.alpha)
        loss = float(loss_elems.sum(axis=1).mean())
        if not np.isfinite(loss):
            raise net.NumericalError(f"non-finite loss at iteration {it}")
        network.backward(grad / train_cfg.batch_size)
        _clip_gradients(params, train_cfg.grad_clip)
        optim.step(params)
        averager.update(it, params)
        model.loss_trace.append(loss)
    averager.finalize(params)
    return model


def train_classifier(
    features: Mapping[str, np.ndarray],
    class_ids: Mapping[str, int],
    head_cfg: HeadConfig,
    train_cfg: TrainConfig,
    holdout_every: int = 10,
) -> HeadModel:
    """Train the k-way class head with cross-entropy.

    Every `holdout_every`-th image (in sorted id order) is held out and
    its post-training accuracy recorded on the model.
    """
    head_cfg.validate()
    if head_cfg.mode != "classifier":
        raise ValueError("train_classifier needs a classifier-mode config")
    ids = sorted(features)
    if not ids:
        raise ValueError("empty training set")
    missing = [i for i in ids if i not in class_ids]
    if missing:
        raise ValueError(f"missing class labels for {missing[:5]}")
    classes = sorted(set(class_ids[i] for i in ids))
    if len(classes) < 2:
        raise ValueError("classification needs at least 2 classes")
    class_index = {c: i for i, c in enumerate(classes)}
    if head_cfg.out_dim != len(classes):
        raise ValueError(f"out_dim {head_cfg.out_dim} != number of classes {len(classes)}")

    holdout = ids[::holdout_every] if holdout_every else []
    train_ids = [i for i in ids if i not in set(holdout)] or ids
    labels = np.array([class_index[class_ids[i]] for i in train_ids])

    in_channels = int(np.asarray(features[ids[0]]).shape[0])
    in_offset, in_scale = _fit_input_norm(features, train_ids)
    rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed]))
    network = build_head(head_cfg, in_channels, rng)
    optim = net.SGD(train_cfg.lr, train_cfg.momentum, train_cfg.weight_decay)

    model = HeadModel(
        config=head_cfg,
        in_channels=in_channels,
        network=network,
        seed=train_cfg.seed,
        target_offset=np.zeros(head_cfg.out_dim),
        target_scale=np.ones(head_cfg.out_dim),
        input_offset=in_offset,
        input_scale=in_scale,
    )
    params = network.parameters()
    averager = _TailAverager(train_cfg.iterations, train_cfg.avg_frac)
    for it in range(train_cfg.iterations):
        idx = rng.integers(0, len(train_ids), size=train_cfg.batch_size)
        x = _stack_features(features, [train_ids[i] for i in idx], in_offset, in_scale)
        out = network.forward(x, mode="train", rng=rng)
        loss_elems, grad = net.cross_entropy(out, labels[idx])
        loss = float(loss_elems.mean())
        if not np.isfinite(loss):
            raise net.NumericalError(f"non-finite loss at iteration {it}")
        network.backward(grad / train_cfg.batch_size)
        _clip_gradients(params, train_cfg.grad_clip)
        optim.step(params)
        averager.update(it, params)
        model.loss_trace.append(loss)
    averager.finalize(params)

    if holdout:
        x = _stack_features(features, holdout, in_offset, in_scale)
        pred = np.argmax(network.forward(x, mode="eval"), axis=1)
        truth = np.array([class_index[class_ids[i]] for i in holdout])
        model.holdout_accuracy = float(np.mean(pred == truth))
    model.class_labels = classes
    return model


def predict_stats(model: HeadModel, features: np.ndarray) -> tuple[float, float]:
    """Predict (u_hat, gamma_hat) or (u_hat, sigma_hat) for one image.

    Deterministic: dropout is identity in eval mode.
    """
    if model.config.mode != "regressor":
        raise ValueError("predict_stats needs a regressor-mode model")
    x = _stack_features({"_": features}, ["_"], model.input_offset, model.input_scale)
    out = model.network.forward(x, mode="eval")[0]
    out = out * model.target_scale + model.target_offset
    return float(out[0]), float(out[1])


def predict_class(model: HeadModel, features: np.ndarray) -> int:
    """Argmax class for one image; ties break toward the lowest class id."""
    if model.config.mode != "classifier":
        raise ValueError("predict_class needs a classifier-mode model")
    x = _stack_features({"_": features}, ["_"], model.input_offset, model.input_scale)
    logits = model.network.forward(x, mode="eval")[0]
    idx = int(np.argmax(logits))  # np.argmax returns the first (lowest) index on ties
    labels = getattr(model, "class_labels", None)
    return labels[idx] if labels is not None else idx


def calibrate(smap: ScoreMap, u_hat: float, gamma_hat: float, eps: float = 1e-6) -> ScoreMap:
    """Mean-max normalize a map with predicted statistics."""
    return normalize_meanmax(smap, u_hat, gamma_hat, eps)


def calibrate_with_regressor(
    model: HeadModel, smap: ScoreMap, features: np.ndarray, eps: float = 1e-6
) -> ScoreMap:
    u_hat, second = predict_stats(model, features)
    if model.config.target == "meanmax":
        return calibrate(smap, u_hat, second, eps)
    return normalize_meanstd(smap, u_hat, max(second, 0.0), eps)


def calibrate_with_classifier(
    model: HeadModel,
    stats: Sequence[ClassStats],
    smap: ScoreMap,
    features: np.ndarray,
    variant: str = "meanmax",
    eps: float = 1e-6,
) -> ScoreMap:
    """Classifier-selected class statistics drive the normalization."""
    cid = predict_class(model, features)
    by_class = {s.class_id: s for s in stats}
    if cid not in by_class:
        raise KeyError(f"predicted class {cid} has no fitted stats")
    st = by_class[cid]
    if variant == "meanmax":
        return normalize_meanmax(smap, st.u, st.gamma, eps)
    if variant == "meanstd":
        return normalize_meanstd(smap, st.u, st.sigma, eps)
    raise ValueError(f"unknown variant {variant!r}")


def save_checkpoint(model: HeadModel, ckpt_dir) -> None:
    """Write head.json (config, seed, target normalization, layer dims) plus
    one ADT1 tensor file per parameter."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    params = model.network.parameters()
    header = {
        "config": asdict(model.config),
        "in_channels": model.in_channels,
        "seed": model.seed,
        "target_offset": list(map(float, model.target_offset)),
        "target_scale": list(map(float, model.target_scale)),
        "input_offset": list(map(float, model.input_offset)),
        "input_scale": list(map(float, model.input_scale)),
        "n_params": len(params),
        "param_shapes": [list(p.value.shape) for p in params],
        "loss_trace": model.loss_trace,
        "holdout_accuracy": model.holdout_accuracy,
        "class_labels": getattr(model, "class_labels", None),
    }
    with open(ckpt_dir / "head.json", "w") as f:
        json.dump(header, f, indent=2)
        f.write("\n")
    for i, p in enumerate(params):
        write_tensor(ckpt_dir / f"param_{i:03d}.adt", p.value)


def load_checkpoint(ckpt_dir) -> HeadModel:
    ckpt_dir = Path(ckpt_dir)
    with open(ckpt_dir / "head.json") as f:
        header = json.load(f)
    cfg = HeadConfig(**header["config"])
    rng = np.random.default_rng(0)  # params are overwritten below
    network = build_head(cfg, header["in_channels"], rng)
    params = network.parameters()
    if len(params) != header["n_params"]:
        raise ValueError("checkpoint parameter count mismatch")
    for i, p in enumerate(params):
        value = read_tensor(ckpt_dir / f"param_{i:03d}.adt")
        if list(value.shape) != list(p.value.shape):
            raise ValueError(f"param {i}: shape mismatch")
        p.value[...] = value
    model = HeadModel(
        config=cfg,
        in_channels=header["in_channels"],
        network=network,
        seed=header["seed"],
        target_offset=np.array(header["target_offset"]),
        target_scale=np.array(header["target_scale"]),
        input_offset=np.array(header["input_offset"]),
        input_scale=np.array(header["input_scale"]),
        loss_trace=list(header.get("loss_trace", [])),
        holdout_accuracy=header.get("holdout_accuracy"),
    )
    if header.get("class_labels") is not None:
        model.class_labels = list(header["class_labels"])
    return model
