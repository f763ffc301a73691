"""Small convolutional classifier with an explicit feature/head split.

``activations_at`` runs the network up to the output of a conv block (the
feature map ``f_l``) and ``head_forward`` runs everything after it (``g_l``).
``forward`` is literally their composition. Activations are exchanged as
channels-last numpy arrays: ``(H, W, C)`` for one excerpt or ``(N, H, W, C)``
for a batch, where H follows pitch and W follows time.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import prt

log = logging.getLogger(__name__)


class ShapeError(ValueError):
    pass


@dataclass
class ModelConfig:
    channels: tuple[int, ...] = (8, 16, 32)
    num_classes: int = 2
    input_shape: tuple[int, int] = (88, 400)
    explain_layer: int = -1
    seed: int = 0

    def __post_init__(self) -> None:
        self.channels = tuple(int(c) for c in self.channels)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.explain_layer < 0:
            self.explain_layer += len(self.channels)
        if not 0 <= self.explain_layer < len(self.channels):
            raise ValueError(f"explain_layer {self.explain_layer} outside 0..{len(self.channels) - 1}")

    def activation_shape(self, layer: int) -> tuple[int, int, int]:
        h, w = self.input_shape
        for _ in range(layer + 1):
            h, w = h // 2, w // 2
        return h, w, self.channels[layer]


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 8
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")


@dataclass
class TrainResult:
    accuracy: float
    macro_f1: float
    history: list[dict] = field(default_factory=list)


class _Net(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        ins = (1,) + cfg.channels[:-1]
        self.convs = nn.ModuleList(nn.Conv2d(i, o, 3, padding=1) for i, o in zip(ins, cfg.channels))
        self.dense = nn.Linear(cfg.channels[-1], cfg.num_classes)

    def features(self, x: torch.Tensor, layer: int) -> torch.Tensor:
        for conv in self.convs[: layer + 1]:
            x = F.max_pool2d(F.relu(conv(x)), 2)
        return x

    def head(self, a: torch.Tensor, layer: int) -> torch.Tensor:
        for conv in self.convs[layer + 1 :]:
            a = F.max_pool2d(F.relu(conv(a)), 2)
        return self.dense(a.mean(dim=(2, 3)))


class Classifier:
    """A piano-roll classifier wrapping a torch network."""

    def __init__(self, config: ModelConfig | None = None, class_names: Sequence[str] | None = None):
        self.config = config or ModelConfig()
        self.class_names = list(class_names or [str(i) for i in range(self.config.num_classes)])
        gen = torch.Generator().manual_seed(self.config.seed)
        self.net = _Net(self.config)
        with torch.no_grad():
            for module in [*self.net.convs, self.net.dense]:
                fan_in = module.weight[0].numel()
                bound = math.sqrt(6.0 / fan_in)
                module.weight.uniform_(-bound, bound, generator=gen)
                module.bias.zero_()
        self.net.eval()
        self.dtype = torch.float32
        self.metrics: dict = {}

    @property
    def num_layers(self) -> int:
        return len(self.config.channels)

    def as_float64(self) -> "Classifier":
        """A double-precision copy for gradient checks."""
        twin = Classifier(self.config, self.class_names)
        twin.net.load_state_dict(self.net.state_dict())
        twin.net.double()
        twin.dtype = torch.float64
        return twin

    # -- shapes -------------------------------------------------------------
    def _layer(self, layer: int | None) -> int:
        if layer is None:
            return self.config.explain_layer
        if not -self.num_layers <= layer < self.num_layers:
            raise ValueError(f"invalid layer index {layer}; model has {self.num_layers} blocks")
        return layer % self.num_layers

    def _input_tensor(self, rolls) -> tuple[torch.Tensor, bool]:
        x = np.asarray(getattr(rolls, "grid", rolls))
        single = x.ndim == 2
        if single:
            x = x[None]
        if x.shape[1:] != self.config.input_shape:
            raise ShapeError(f"expected input of shape {self.config.input_shape}, got {x.shape[1:]}")
        return torch.as_tensor(x, dtype=self.dtype)[:, None], single

    def _act_tensor(self, act: np.ndarray, layer: int) -> tuple[torch.Tensor, bool]:
        a = np.asarray(act)
        single = a.ndim == 3
        if single:
            a = a[None]
        expected = self.config.activation_shape(layer)
        if a.shape[1:] != expected:
            raise ShapeError(f"expected activations of shape {expected} at layer {layer}, got {a.shape[1:]}")
        return torch.as_tensor(a, dtype=self.dtype).permute(0, 3, 1, 2), single

    # -- f_l, g_l and their composition --------------------------------------
    def activations_at(self, rolls, layer: int | None = None, batch_size: int = 64) -> np.ndarray:
        """Feature map at ``layer`` as ``(H, W, C)`` or ``(N, H, W, C)``."""
        layer = self._layer(layer)
        x, single = self._input_tensor(rolls)
        out = []
        with torch.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self.net.features(x[i : i + batch_size], layer).permute(0, 2, 3, 1).numpy())
        acts = np.concatenate(out) if out else np.zeros((0, *self.config.activation_shape(layer)))
        return acts[0] if single else acts

    def head_forward(self, act: np.ndarray, layer: int | None = None, batch_size: int = 64) -> np.ndarray:
        layer = self._layer(layer)
        a, single = self._act_tensor(act, layer)
        out = []
        with torch.no_grad():
            for i in range(0, len(a), batch_size):
                out.append(self.net.head(a[i : i + batch_size], layer).numpy())
        logits = np.concatenate(out) if out else np.zeros((0, self.config.num_classes))
        return logits[0] if single else logits

    def forward(self, rolls) -> np.ndarray:
        layer = self.config.explain_layer
        return self.head_forward(self.activations_at(rolls, layer), layer)

    def predict(self, rolls) -> np.ndarray:
        return np.atleast_2d(self.forward(rolls)).argmax(axis=1)

    def grad_head(self, act: np.ndarray, layer: int | None, class_o: int, batch_size: int = 64) -> np.ndarray:
        """Gradient of logit ``class_o`` with respect to every activation entry."""
        if not 0 <= class_o < self.config.num_classes:
            raise ValueError(f"invalid class {class_o}; model has {self.config.num_classes} classes")
        layer = self._layer(layer)
        a, single = self._act_tensor(act, layer)
        grads = []
        for i in range(0, len(a), batch_size):
            chunk = a[i : i + batch_size].clone().requires_grad_(True)
            logits = self.net.head(chunk, layer)
            (g,) = torch.autograd.grad(logits[:, class_o].sum(), chunk)
            grads.append(g.permute(0, 2, 3, 1).numpy())
        out = np.concatenate(grads)
        return out[0] if single else out

    # -- persistence ----------------------------------------------------------
    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = []
        for name, tensor in self.net.state_dict().items():
            prt.save(directory / f"{name}.prt", tensor.float().numpy(), {"name": name})
            names.append(name)
        manifest = {
            "architecture": asdict(self.config),
            "class_names": self.class_names,
            "layers": [f"block{i}" for i in range(self.num_layers)],
            "tensors": names,
            "seed": self.config.seed,
            "metrics": self.metrics,
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory: str | Path) -> "Classifier":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        arch = manifest["architecture"]
        model = cls(ModelConfig(**arch), manifest["class_names"])
        state = {name: torch.as_tensor(prt.load(directory / f"{name}.prt")[0]) for name in manifest["tensors"]}
        model.net.load_state_dict(state)
        model.metrics = manifest.get("metrics", {})
        return model


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int) -> float:
    scores = []
    for c in range(num_classes):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def train(
    model: Classifier,
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray,
    val_y: np.ndarray,
    cfg: TrainConfig | None = None,
) -> TrainResult:
    """SGD with momentum, L2 weight decay, cross-entropy and cosine-annealed lr.

    Mutates ``model`` in place and returns validation accuracy and macro-F1.
    """
    cfg = cfg or TrainConfig()
    train_x, train_y = np.asarray(train_x, dtype=np.float32), np.asarray(train_y, dtype=np.int64)
    if len(train_x) == 0:
        raise ValueError("empty training set")
    if len(np.unique(train_y)) < 2:
        raise ValueError("training set needs at least two classes")
    torch.manual_seed(cfg.rng_seed)
    rng = np.random.default_rng(cfg.rng_seed)
    net = model.net
    opt = torch.optim.SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.epochs, 1))
    xt = torch.as_tensor(train_x)[:, None]
    yt = torch.as_tensor(train_y)
    layer = model.num_layers - 1
    history = []
    for epoch in range(cfg.epochs):
        net.train()
        order = rng.permutation(len(xt))
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[i : i + cfg.batch_size])
            logits = net.head(net.features(xt[idx], layer), layer)
            loss = F.cross_entropy(logits, yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        net.eval()
        acc = float(np.mean(model.predict(val_x) == val_y)) if len(val_x) else float("nan")
        record = {"epoch": epoch + 1, "loss": total / len(xt), "val_accuracy": acc, "lr": opt.param_groups[0]["lr"]}
        history.append(record)
        log.info("epoch", extra={"event": "epoch", **record})
    net.eval()
    if len(val_x):
        pred = model.predict(val_x)
        acc = float(np.mean(pred == val_y))
        f1 = macro_f1(np.asarray(val_y), pred, model.config.num_classes)
    else:
        acc = f1 = float("nan")
    model.metrics = {"val_accuracy": acc, "val_macro_f1": f1, "epochs": cfg.epochs, "train": asdict(cfg)}
    return TrainResult(acc, f1, history)
