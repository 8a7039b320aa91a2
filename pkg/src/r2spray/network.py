"""4-block 3D CNN classifier with strided down-convolutions.

Architecture: four blocks of (3x3x3 conv, 8 channels, ReLU) + (3x3x3 conv,
stride 2, 8 channels, ReLU), then flatten, a 16-unit dense ReLU layer and a
2-unit dense output with softmax. No pooling, no batch norm. All biases are
clamped to <= 0 after every optimizer step, which keeps activations sparse.

Training uses Adam, a reduce-on-plateau schedule (factor 0.3, patience 5,
floor 1e-6) and, on each plateau, a weight reset to the epoch where the
plateau began. The trainer runs single-threaded deterministically when asked.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError, NumericError

__all__ = [
    "ConvNet3D",
    "TrainConfig",
    "TrainHistory",
    "NegativeBiasAdam",
    "build_network",
    "parameter_count",
    "lr_schedule_update",
    "train_model",
    "save_checkpoint",
    "load_checkpoint",
    "VolumeNetClassifier",
]

KERNEL = 3
CHECKPOINT_MAGIC = b"R2SPNET1"


def _ceil_half(n: int) -> int:
    return (n + 1) // 2


class ConvNet3D(nn.Module):
    """The network as an explicit step list so relevance propagation can
    walk it backwards with cached inputs."""

    def __init__(
        self,
        input_dims: tuple[int, int, int],
        in_channels: int = 1,
        blocks: int = 4,
        channels: int = 8,
        dense_units: int = 16,
        n_classes: int = 2,
    ):
        super().__init__()
        self.input_dims = tuple(int(d) for d in input_dims)
        self.in_channels = in_channels
        self.blocks = blocks
        self.channels = channels
        self.dense_units = dense_units
        self.n_classes = n_classes

        kinds: list[str] = []
        modules: list[nn.Module] = []
        dims = list(self.input_dims)
        c_in = in_channels
        for _ in range(blocks):
            modules.append(nn.Conv3d(c_in, channels, KERNEL, stride=1, padding=1))
            kinds.append("conv3")
            modules.append(nn.Identity())
            kinds.append("relu")
            modules.append(nn.Conv3d(channels, channels, KERNEL, stride=2, padding=1))
            kinds.append("downconv3")
            modules.append(nn.Identity())
            kinds.append("relu")
            c_in = channels
            dims = [_ceil_half(d) for d in dims]
        self.final_spatial = tuple(dims)
        flat = channels * dims[0] * dims[1] * dims[2]
        modules.append(nn.Identity())
        kinds.append("flatten")
        modules.append(nn.Linear(flat, dense_units))
        kinds.append("dense")
        modules.append(nn.Identity())
        kinds.append("relu")
        modules.append(nn.Linear(dense_units, n_classes))
        kinds.append("dense")

        self.steps = nn.ModuleList(modules)
        self.kinds = kinds

    def init_params(self, seed: int = 0) -> None:
        """He-uniform weights scaled by fan-in; biases start at -0.01."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for mod in self.steps:
                if isinstance(mod, (nn.Conv3d, nn.Linear)):
                    fan_in = mod.weight[0].numel()
                    bound = math.sqrt(6.0 / fan_in)
                    w = torch.empty(
                        mod.weight.shape, dtype=torch.float64
                    ).uniform_(-bound, bound, generator=gen)
                    mod.weight.copy_(w.to(mod.weight.dtype))
                    mod.bias.fill_(-0.01)

    def forward(self, x: torch.Tensor, cache: list | None = None) -> torch.Tensor:
        """Returns logits of shape (batch, n_classes).

        When cache is a list it receives the input of every step, giving the
        pre-activation of each ReLU and the inputs to every conv/dense layer.
        """
        for idx, (kind, mod) in enumerate(zip(self.kinds, self.steps)):
            if cache is not None:
                cache.append(x)
            if kind in ("conv3", "downconv3", "dense"):
                x = mod(x)
            elif kind == "relu":
                x = torch.relu(x)
            elif kind == "flatten":
                x = x.reshape(x.shape[0], -1)
            else:  # pragma: no cover
                raise ConfigError(f"unknown step kind {kind}")
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations at layer index {idx} ({kind})")
        return x

    def probabilities(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.forward(x), dim=1)

    def clamp_biases(self) -> None:
        with torch.no_grad():
            for mod in self.steps:
                if isinstance(mod, (nn.Conv3d, nn.Linear)):
                    mod.bias.clamp_(max=0.0)

    def max_bias(self) -> float:
        return max(
            float(mod.bias.max())
            for mod in self.steps
            if isinstance(mod, (nn.Conv3d, nn.Linear))
        )


def build_network(
    input_dims: tuple[int, int, int],
    in_channels: int = 1,
    blocks: int = 4,
    channels: int = 8,
    dense_units: int = 16,
    n_classes: int = 2,
    dtype: torch.dtype = torch.float64,
    seed: int = 0,
) -> ConvNet3D:
    net = ConvNet3D(input_dims, in_channels, blocks, channels, dense_units, n_classes)
    net.to(dtype)
    net.init_params(seed)
    return net


def parameter_count(
    input_dims: tuple[int, int, int],
    in_channels: int = 1,
    blocks: int = 4,
    channels: int = 8,
    dense_units: int = 16,
    n_classes: int = 2,
) -> int:
    """Closed-form trainable parameter count for the architecture."""
    k3 = KERNEL**3
    total = 0
    c_in = in_channels
    dims = list(input_dims)
    for _ in range(blocks):
        total += k3 * c_in * channels + channels
        total += k3 * channels * channels + channels
        c_in = channels
        dims = [_ceil_half(d) for d in dims]
    flat = channels * dims[0] * dims[1] * dims[2]
    total += flat * dense_units + dense_units
    total += dense_units * n_classes + n_classes
    return total


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

class NegativeBiasAdam:
    """Adam with bias-corrected moments; after each step every parameter
    named `*bias*` is clamped to <= 0. Moments can be reset to zero (used on
    plateau weight resets)."""

    def __init__(self, module: nn.Module, lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self._named = list(module.named_parameters())
        self.reset_moments()

    def reset_moments(self) -> None:
        self.t = 0
        self.m = [torch.zeros_like(p) for _, p in self._named]
        self.v = [torch.zeros_like(p) for _, p in self._named]

    @torch.no_grad()
    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for (name, p), m, v in zip(self._named, self.m, self.v):
            g = p.grad
            if g is not None:
                m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
                v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
                p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(self.eps), value=-self.lr)
            if "bias" in name:
                p.clamp_(max=0.0)

    def zero_grad(self) -> None:
        for _, p in self._named:
            p.grad = None


def lr_schedule_update(
    val_losses,
    current_lr: float,
    patience: int = 5,
    factor: float = 0.3,
    lr_floor: float = 1e-6,
    tol: float = 1e-6,
    last_event_epoch: int = -1,
):
    """Reduce-on-plateau rule over the validation-loss history.

    Epochs are 0-based indices into val_losses. When the last `patience`
    epochs (counted after the later of the last improvement and the last
    plateau event) all failed to improve the best loss by more than tol,
    returns (reduced lr, epoch of last improvement); otherwise
    (current_lr, None). The returned epoch is the weight-reset target.
    """
    best = math.inf
    last_improve = -1
    for e, v in enumerate(val_losses):
        if v < best - tol:
            best = v
            last_improve = e
    stall_start = max(last_improve, last_event_epoch)
    stalled = len(val_losses) - 1 - stall_start
    if stalled >= patience:
        return max(current_lr * factor, lr_floor), last_improve
    return current_lr, None


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 6
    lr_init: float = 1e-3
    lr_factor: float = 0.3
    patience: int = 5
    lr_floor: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    relevance_lambda: float = 1.0
    improvement_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.lr_floor > self.lr_init:
            raise ConfigError("lr_floor must not exceed lr_init")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    plateau_events: list[dict] = field(default_factory=list)
    best_epoch: int = -1

    def as_dict(self) -> dict:
        return asdict(self)


def _as_tensor(X: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(X), dtype=dtype)


def _evaluate(
    net: ConvNet3D,
    X: torch.Tensor,
    y: torch.Tensor,
    batch_size: int,
    guidance: torch.Tensor | None = None,
    rel_lambda: float = 0.0,
    rel_cfg=None,
):
    """Mean loss and accuracy; the loss mirrors the training objective
    (cross-entropy plus the relevance term when guidance is given), so the
    plateau schedule and best-epoch selection see relevance progress."""
    loss_sum = 0.0
    correct = 0
    with torch.no_grad():
        for start in range(0, X.shape[0], batch_size):
            xb = X[start : start + batch_size]
            yb = y[start : start + batch_size]
            if guidance is None:
                logits = net(xb)
            else:
                from .relevance import lrp_relevance_in_graph, relevance_guided_loss

                cache: list = []
                logits = net(xb, cache=cache)
                rel = lrp_relevance_in_graph(net, cache, logits, yb, rel_cfg)
                loss_sum += rel_lambda * float(
                    relevance_guided_loss(rel, guidance[start : start + batch_size],
                                          eps=rel_cfg.epsilon)
                ) * len(yb)
            loss_sum += float(
                nn.functional.cross_entropy(logits, yb, reduction="sum")
            )
            correct += int((logits.argmax(dim=1) == yb).sum())
    n = X.shape[0]
    return loss_sum / n, correct / n


def train_model(
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_val: np.ndarray,
    y_val: np.ndarray,
    config: TrainConfig,
    net: ConvNet3D | None = None,
    dtype: torch.dtype = torch.float32,
    guidance_masks: np.ndarray | None = None,
    guidance_masks_val: np.ndarray | None = None,
    relevance_config=None,
) -> tuple[ConvNet3D, TrainHistory]:
    """Full training loop. Returns the best-validation-loss weights.

    When guidance_masks is given (shape like X_train), every batch adds the
    relevance-guided penalty from the relevance module, weighted by
    config.relevance_lambda; guidance_masks_val extends the same term to the
    validation loss.
    """
    if X_train.shape[0] == 0:
        raise DataError("empty training set")
    Xt = _as_tensor(X_train, dtype)
    yt = torch.as_tensor(np.asarray(y_train), dtype=torch.long)
    Xv = _as_tensor(X_val, dtype)
    yv = torch.as_tensor(np.asarray(y_val), dtype=torch.long)
    Gt = _as_tensor(guidance_masks, dtype) if guidance_masks is not None else None
    Gv = _as_tensor(guidance_masks_val, dtype) if guidance_masks_val is not None else None
    if Gt is not None and Gv is None:
        raise DataError("relevance-guided training needs validation guidance masks")

    if net is None:
        net = build_network(tuple(X_train.shape[2:]), in_channels=X_train.shape[1],
                            dtype=dtype, seed=config.seed)
    optim = NegativeBiasAdam(
        net, config.lr_init, betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
    )
    net.clamp_biases()  # the bias invariant holds from step zero

    rel_cfg = None
    if Gt is not None:
        from .relevance import (
            RelevanceConfig,
            lrp_relevance_in_graph,
            relevance_guided_loss,
        )

        rel_cfg = relevance_config if relevance_config is not None else RelevanceConfig()

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5EED]))
    history = TrainHistory()
    snapshots: list[dict] = []
    current_lr = config.lr_init
    last_event_epoch = -1
    n = Xt.shape[0]

    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            xb, yb = Xt[idx], yt[idx]
            optim.zero_grad()
            if Gt is None:
                logits = net(xb)
                loss = nn.functional.cross_entropy(logits, yb)
            else:
                cache: list = []
                logits = net(xb, cache=cache)
                loss = nn.functional.cross_entropy(logits, yb)
                rel = lrp_relevance_in_graph(net, cache, logits, yb, rel_cfg)
                l_rel = relevance_guided_loss(rel, Gt[idx], eps=rel_cfg.epsilon)
                loss = loss + config.relevance_lambda * l_rel
            if not torch.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}; history: {history.as_dict()}"
                )
            loss.backward()
            optim.lr = current_lr
            optim.step()
            epoch_loss += float(loss.detach()) * len(idx)
            correct += int((logits.argmax(dim=1) == yb).sum())

        history.train_loss.append(epoch_loss / n)
        history.train_acc.append(correct / n)
        vl, va = _evaluate(
            net, Xv, yv, config.batch_size,
            guidance=Gv, rel_lambda=config.relevance_lambda, rel_cfg=rel_cfg,
        )
        history.val_loss.append(vl)
        history.val_acc.append(va)
        history.lr.append(current_lr)
        snapshots.append({k: v.detach().clone() for k, v in net.state_dict().items()})

        new_lr, reset_to = lr_schedule_update(
            history.val_loss,
            current_lr,
            patience=config.patience,
            factor=config.lr_factor,
            lr_floor=config.lr_floor,
            tol=config.improvement_tol,
            last_event_epoch=last_event_epoch,
        )
        if reset_to is not None:
            history.plateau_events.append(
                {
                    "epoch": epoch,
                    "lr_before": current_lr,
                    "lr_after": new_lr,
                    "reset_to_epoch": reset_to,
                }
            )
            current_lr = new_lr
            last_event_epoch = epoch
            if reset_to >= 0:
                net.load_state_dict(snapshots[reset_to])
            optim.reset_moments()

    best_epoch = int(np.argmin(history.val_loss)) if history.val_loss else -1
    history.best_epoch = best_epoch
    if best_epoch >= 0:
        net.load_state_dict(snapshots[best_epoch])
    return net, history


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

_DTYPE_TAGS = {torch.float32: "float32", torch.float64: "float64"}
_TAG_DTYPES = {"float32": np.float32, "float64": np.float64}


def save_checkpoint(net: ConvNet3D, path: str, config: TrainConfig | None = None,
                    history: TrainHistory | None = None) -> None:
    """Versioned binary container: layer table + raw little-endian tensors.

    A JSON sidecar (<path>.json) carries the train config and history.
    """
    state = net.state_dict()
    table = []
    blobs = []
    offset = 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        tag = _DTYPE_TAGS[tensor.dtype]
        raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
        table.append(
            {"name": name, "shape": list(arr.shape), "dtype": tag, "offset": offset}
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": 1,
        "arch": {
            "input_dims": list(net.input_dims),
            "in_channels": net.in_channels,
            "blocks": net.blocks,
            "channels": net.channels,
            "dense_units": net.dense_units,
            "n_classes": net.n_classes,
        },
        "layer_table": table,
    }
    payload = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for raw in blobs:
            fh.write(raw)
    sidecar = {
        "config": asdict(config) if config is not None else None,
        "history": history.as_dict() if history is not None else None,
    }
    with open(path + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def load_checkpoint(path: str) -> tuple[ConvNet3D, dict]:
    """Rebuild the network from a checkpoint; returns (net, sidecar dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: bad checkpoint magic {magic!r}")
        (hdr_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hdr_len))
        body = fh.read()
    arch = header["arch"]
    net = ConvNet3D(
        tuple(arch["input_dims"]),
        in_channels=arch["in_channels"],
        blocks=arch["blocks"],
        channels=arch["channels"],
        dense_units=arch["dense_units"],
        n_classes=arch["n_classes"],
    )
    state = {}
    for entry in header["layer_table"]:
        np_dtype = np.dtype(_TAG_DTYPES[entry["dtype"]]).newbyteorder("<")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(
            body, dtype=np_dtype, count=count, offset=start
        ).reshape(shape)
        state[entry["name"]] = torch.as_tensor(arr.copy())
    first = next(iter(state.values()))
    net.to(first.dtype)
    net.load_state_dict(state)
    import os

    sidecar_path = path + ".json"
    sidecar = {}
    if os.path.exists(sidecar_path):
        with open(sidecar_path) as fh:
            sidecar = json.load(fh)
    return net, sidecar


# ---------------------------------------------------------------------------
# Estimator facade
# ---------------------------------------------------------------------------

from sklearn.base import BaseEstimator, ClassifierMixin  # noqa: E402

from .validation import check_volume_batch  # noqa: E402


class VolumeNetClassifier(BaseEstimator, ClassifierMixin):
    """sklearn-style wrapper around the 3D CNN.

    X is (n_samples, channels, nx, ny, nz). Variant "A" trains on the raw
    input, "B" multiplies inputs by brain masks before training and
    prediction, "C" adds the relevance-guided loss using guidance masks.
    """

    def __init__(
        self,
        variant: str = "A",
        epochs: int = 60,
        batch_size: int = 6,
        lr_init: float = 1e-3,
        lr_factor: float = 0.3,
        patience: int = 5,
        lr_floor: float = 1e-6,
        relevance_lambda: float = 1.0,
        val_fraction: float = 0.15,
        dtype: str = "float32",
        seed: int = 0,
    ):
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_init = lr_init
        self.lr_factor = lr_factor
        self.patience = patience
        self.lr_floor = lr_floor
        self.relevance_lambda = relevance_lambda
        self.val_fraction = val_fraction
        self.dtype = dtype
        self.seed = seed

    def _torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def _prepare(self, X, masks):
        X = check_volume_batch(X)
        if self.variant == "B":
            if masks is None:
                raise ConfigError("variant B requires brain masks")
            masks = check_volume_batch(masks)
            if masks.shape != X.shape:
                raise DataError("mask batch shape differs from input batch")
            X = X * masks
        return X

    def fit(self, X, y, masks=None, guidance_masks=None, X_val=None, y_val=None,
            val_masks=None, val_guidance_masks=None):
        if self.variant not in ("A", "B", "C"):
            raise ConfigError(f"variant must be A, B or C, got {self.variant!r}")
        X = self._prepare(X, masks)
        y = np.asarray(y, dtype=np.int64)

        guidance = val_guidance = None
        if self.variant == "C":
            if guidance_masks is None:
                raise ConfigError("variant C requires guidance masks")
            guidance = check_volume_batch(guidance_masks)
            if val_guidance_masks is not None:
                val_guidance = check_volume_batch(val_guidance_masks)

        if X_val is None:
            # internal split, deterministic given seed
            rng = np.random.default_rng(self.seed)
            perm = rng.permutation(X.shape[0])
            n_val = max(1, int(round(self.val_fraction * X.shape[0])))
            val_idx, train_idx = perm[:n_val], perm[n_val:]
            X_val, y_val = X[val_idx], y[val_idx]
            X, y = X[train_idx], y[train_idx]
            if guidance is not None:
                val_guidance = guidance[val_idx]
                guidance = guidance[train_idx]
        else:
            X_val = self._prepare(X_val, val_masks)
            y_val = np.asarray(y_val, dtype=np.int64)
            if guidance is not None and val_guidance is None:
                raise ConfigError(
                    "variant C with an explicit validation set needs val_guidance_masks"
                )

        config = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_init=self.lr_init,
            lr_factor=self.lr_factor,
            patience=self.patience,
            lr_floor=self.lr_floor,
            relevance_lambda=self.relevance_lambda,
            seed=self.seed,
        )
        self.net_, self.history_ = train_model(
            X, y, X_val, y_val, config,
            dtype=self._torch_dtype(),
            guidance_masks=guidance,
            guidance_masks_val=val_guidance,
        )
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X, masks=None):
        X = self._prepare(X, masks)
        dtype = next(self.net_.parameters()).dtype
        probs = []
        with torch.no_grad():
            for start in range(0, X.shape[0], self.batch_size):
                xb = _as_tensor(X[start : start + self.batch_size], dtype)
                probs.append(self.net_.probabilities(xb).numpy())
        return np.concatenate(probs, axis=0)

    def predict(self, X, masks=None):
        return self.predict_proba(X, masks).argmax(axis=1)
