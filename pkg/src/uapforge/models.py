"""Classifier zoo, supervised training, prediction and checkpointing.

Three heterogeneous desk-scale CNNs (plus a tiny demo net) stand in for the
large pretrained models usually attacked: transfer and ensemble protocols
need several distinct targets, and these train in minutes on a CPU. All
models take (N, C, H, W) inputs scaled to [0, 1] and emit logits.
"""

from __future__ import annotations

from collections import namedtuple
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor, backward
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, to_model_units
from .layers import BatchNorm, Conv, Flatten, Linear, ReLU, Residual, Stack
from .optim import AdamState, adam_step, zero_grads
from .rng import make_rng

MODEL_RANGE = (0.0, 1.0)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, last_loss: float):
        self.epoch = epoch
        self.last_loss = last_loss
        super().__init__(f"loss became non-finite in epoch {epoch}; last finite loss {last_loss:.4f}")


class InputRangeError(ValueError):
    pass


@dataclass(frozen=True)
class ZooArch:
    """Architecture id plus its block recipe.

    Blocks: ("conv", out_channels, stride) and ("res", channels); every conv
    block is conv3x3 + batchnorm + relu, and a flatten + linear head is
    appended for the requested class count.
    """

    arch_id: str
    blocks: tuple = ()


ZOO: dict[str, ZooArch] = {
    a.arch_id: a
    for a in [
        ZooArch("cnn-a", (("conv", 32, 1), ("conv", 64, 2), ("conv", 128, 2))),
        ZooArch(
            "cnn-b",
            (("conv", 48, 2), ("conv", 96, 1), ("conv", 96, 2), ("conv", 144, 1), ("conv", 192, 2)),
        ),
        ZooArch("cnn-c", (("conv", 32, 2), ("res", 32), ("conv", 64, 2), ("res", 64), ("conv", 128, 2))),
        ZooArch("cnn-demo", (("conv", 16, 1), ("conv", 32, 2))),
    ]
}


def zoo_arch(arch: "str | ZooArch") -> ZooArch:
    if isinstance(arch, ZooArch):
        return arch
    try:
        return ZOO[arch]
    except KeyError:
        raise KeyError(f"unknown architecture {arch!r}; have {sorted(ZOO)}") from None


@dataclass
class TargetModel:
    """A trained (or initialized) classifier plus its training metadata."""

    arch_id: str
    stack: Stack
    input_shape: tuple[int, int, int]
    num_classes: int
    meta: dict = field(default_factory=dict)

    def forward(self, x: Tensor, train: bool = False, taps: Optional[list] = None) -> Tensor:
        for relu in self.stack.relu_layers():
            relu.taps = taps
        try:
            return self.stack.forward(x, train)
        finally:
            for relu in self.stack.relu_layers():
                relu.taps = None

    def parameters(self) -> dict[str, Tensor]:
        return self.stack.params()

    def state(self) -> dict[str, np.ndarray]:
        return self.stack.state()

    def clone(self) -> "TargetModel":
        twin = build_model(self.arch_id, self.input_shape, self.num_classes, seed=0)
        twin.stack.load_state({k: v.copy() for k, v in self.state().items()})
        twin.meta = dict(self.meta)
        return twin

    def save(self, path: str) -> None:
        meta = {
            "kind": "target",
            "arch_id": self.arch_id,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "accuracy": self.meta.get("val_accuracy"),
            "seed": self.meta.get("seed"),
            "epochs": self.meta.get("epochs"),
        }
        save_checkpoint(path, self.state(), meta)

    @staticmethod
    def load(path: str) -> "TargetModel":
        tensors, meta = load_checkpoint(path)
        if meta.get("kind") != "target":
            raise ValueError(f"{path}: checkpoint kind {meta.get('kind')!r} is not a target model")
        model = build_model(meta["arch_id"], tuple(meta["input_shape"]), meta["num_classes"], seed=0)
        model.stack.load_state(tensors)
        model.meta = {"val_accuracy": meta.get("accuracy"), "seed": meta.get("seed"), "epochs": meta.get("epochs")}
        return model


def build_model(arch: "str | ZooArch", input_shape: tuple[int, int, int], num_classes: int, seed: int) -> TargetModel:
    spec = zoo_arch(arch)
    rng = make_rng(seed, "init", spec.arch_id)
    c, h, w = input_shape
    layers: list[tuple[str, object]] = []
    ch, hh, ww = c, h, w
    for i, block in enumerate(spec.blocks):
        if block[0] == "conv":
            _, out_ch, stride = block
            layers.append((f"b{i}.conv", Conv(rng, ch, out_ch, stride=stride)))
            layers.append((f"b{i}.bn", BatchNorm(out_ch)))
            layers.append((f"b{i}.relu", ReLU(tap=True)))
            ch = out_ch
            hh = (hh + 2 - 3) // stride + 1
            ww = (ww + 2 - 3) // stride + 1
        elif block[0] == "res":
            layers.append((f"b{i}.res", Residual(rng, block[1])))
        else:
            raise ValueError(f"unknown block kind {block[0]!r}")
    layers.append(("flatten", Flatten()))
    layers.append(("head", Linear(rng, ch * hh * ww, num_classes)))
    return TargetModel(spec.arch_id, Stack(layers), input_shape, num_classes)


Prediction = namedtuple("Prediction", ["probs", "log_probs"])


def predict(model: TargetModel, batch: np.ndarray, *, tol: float = 1e-6) -> Prediction:
    """Eval-mode class probabilities (softmax of the logits) for a clean batch.

    Inputs must already be in the model's [0, 1] range; clipping belongs to
    the attack pipeline, so out-of-range pixels are an error here.
    """
    x = np.asarray(batch, dtype=np.float32)
    lo, hi = MODEL_RANGE
    if x.min() < lo - tol or x.max() > hi + tol:
        raise InputRangeError(
            f"pixels outside [{lo}, {hi}]: min {x.min():.4f}, max {x.max():.4f}"
        )
    logits = model.forward(Tensor(x), train=False)
    probs = ad.softmax(logits)
    logp = ad.log_softmax(logits)
    return Prediction(probs.data.copy(), logp.data.copy())


def predict_classes(model: TargetModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax prediction over a (possibly large) stack of model-unit images."""
    out = np.empty(images.shape[0], dtype=np.int64)
    for start in range(0, images.shape[0], batch_size):
        stop = min(start + batch_size, images.shape[0])
        logits = model.forward(Tensor(images[start:stop]), train=False)
        out[start:stop] = logits.data.argmax(axis=1)
    return out


def accuracy(model: TargetModel, ds: Dataset, batch_size: int = 256) -> float:
    preds = predict_classes(model, to_model_units(ds.images, ds.input_range), batch_size)
    return float((preds == ds.labels).mean())


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    logp = ad.log_softmax(logits)
    picked = ad.gather_class(logp, labels)
    return ad.scalar_mul(ad.mean(picked), -1.0)


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0


def train_target(
    arch: "str | ZooArch",
    train: Dataset,
    val: Optional[Dataset],
    cfg: TrainConfig,
    model: Optional[TargetModel] = None,
) -> TargetModel:
    """Cross-entropy training with Adam; deterministic given cfg.seed.

    Passing ``model`` continues training existing weights (used by the
    adversarial-training defense). Divergence (non-finite loss) aborts with
    the last finite epoch in the exception.
    """
    if model is None:
        model = build_model(arch, train.image_shape, train.num_classes, seed=cfg.seed)
    params = model.parameters()
    opt = AdamState(learning_rate=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    rng = make_rng(cfg.seed, "train-target")
    images = to_model_units(train.images, train.input_range)
    labels = train.labels
    n = len(train)
    last_finite = 0.0
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            with Graph() as g:
                logits = model.forward(Tensor(images[idx]), train=True)
                loss = cross_entropy(logits, labels[idx])
            lval = loss.item()
            if not np.isfinite(lval):
                raise TrainingDiverged(epoch, last_finite)
            last_finite = lval
            backward(g, loss)
            adam_step(opt, params)
            zero_grads(params)
            epoch_loss += lval
            batches += 1
        history.append(epoch_loss / max(batches, 1))
    model.meta = {
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "train_loss": history,
        "val_accuracy": accuracy(model, val) if val is not None else None,
    }
    return model
