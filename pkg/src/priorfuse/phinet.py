"""Fusion-map estimator network, its training loss, and the training loop.

The network maps a (normalized) observation to a per-pixel, per-channel
fusion weight in [0,1] through a sigmoid head. Training minimizes the
squared error of the fused output plus a small l1 penalty on the weights
that biases ties toward data fidelity.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .imagestack import Image, ImageError, PhiMap, load_array, save_array


@dataclass
class PhiNetConfig:
    depth: int = 8
    width: int = 32
    kernel: int = 3
    in_channels: int = 3
    out_channels: int = 3

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.kernel % 2 != 1:
            raise ValueError("kernel must be odd (same-padding contract)")


# reference-scale architecture; desk-scale presets use the defaults above
FULL_SCALE = PhiNetConfig(depth=17, width=64)


class PhiNet(nn.Module):
    """Conv / batch-norm / ReLU stack with a sigmoid-squashed head.

    The final convolution is zero-initialized so an untrained network
    predicts exactly 0.5 everywhere.
    """

    def __init__(self, config: PhiNetConfig):
        super().__init__()
        self.config = config
        k, pad = config.kernel, config.kernel // 2
        layers = [nn.Conv2d(config.in_channels, config.width, k, padding=pad),
                  nn.ReLU(inplace=True)]
        for _ in range(config.depth - 2):
            layers += [nn.Conv2d(config.width, config.width, k, padding=pad),
                       nn.BatchNorm2d(config.width),
                       nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(config.width, config.out_channels, k, padding=pad)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.head(self.body(y)))


def predict_phi(net: PhiNet, y: Image) -> PhiMap:
    """Inference-mode fusion map for one observation."""
    if y.channels != net.config.in_channels:
        raise ImageError(
            f"observation has {y.channels} channels, network expects "
            f"{net.config.in_channels}")
    net.eval()
    with torch.no_grad():
        out = net(torch.from_numpy(np.ascontiguousarray(y.data))[None])[0]
    return PhiMap(np.clip(out.numpy(), 0.0, 1.0))


def fused_restoration_loss(phi: PhiMap, y: Image, prior_img: Image, x: Image,
                           g_inv=None, rho: float = 1e-5) -> float:
    """Training objective for one sample:
    || (1-phi) . g_inv(y) + phi . prior - x ||_2^2 + rho * ||phi||_1."""
    fid = g_inv(y) if g_inv is not None else y
    if not (phi.shape == fid.shape == prior_img.shape == x.shape):
        raise ImageError("phi / fidelity / prior / target shape mismatch")
    p = phi.data.astype(np.float64)
    fused = (1.0 - p) * fid.data + p * prior_img.data
    sq = float(np.sum((fused - x.data.astype(np.float64)) ** 2))
    return sq + rho * float(np.sum(np.abs(p)))


def _batch_loss_t(net: PhiNet, y: torch.Tensor, fid: torch.Tensor,
                  prior: torch.Tensor, x: torch.Tensor, rho: float) -> torch.Tensor:
    phi = net(y)
    fused = (1.0 - phi) * fid + phi * prior
    per_sample = torch.sum((fused - x) ** 2, dim=(1, 2, 3)) \
        + rho * torch.sum(torch.abs(phi), dim=(1, 2, 3))
    return per_sample.mean()


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr0: float = 0.01
    rho: float = 1e-5
    epochs: int = 25
    restart_epochs: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if self.restart_epochs < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs, restart period and batch size must be >= 1")


@dataclass
class TrainSample:
    """Observation (after the bijective companion and normalization), the
    precomputed prior projection, and the clean target.

    `fidelity` defaults to the observation; colorization supplies a separate
    fidelity grid because the network input (luminance) and the fused
    channels (a, b) differ.
    """

    observation: Image
    prior_img: Image
    target: Image
    fidelity: Image | None = None

    def __post_init__(self):
        if self.fidelity is None:
            self.fidelity = self.observation
        if not (self.fidelity.shape == self.prior_img.shape == self.target.shape):
            raise ImageError("fidelity, prior and target must share shape")
        if self.observation.shape[1:] != self.target.shape[1:]:
            raise ImageError("observation spatial shape must match target")


def cosine_restart_lr(lr0: float, epoch: int, restart_epochs: int,
                      batch_idx: int = 0, num_batches: int = 1) -> float:
    """Cosine annealing from lr0 to 0 within each restart period, restarting
    at lr0 exactly at the start of every period."""
    frac = ((epoch % restart_epochs) + batch_idx / num_batches) / restart_epochs
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * frac))


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int):
        super().__init__(f"non-finite training loss at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


def train(net: PhiNet, samples: list[TrainSample], cfg: TrainConfig,
          history: dict | None = None, start_epoch: int = 0,
          momentum_state: dict | None = None):
    """SGD (momentum 0.9) with per-step cosine-annealed, warm-restarted
    learning rate. Prior images are fixed inputs; only the network's own
    parameters are updated. Deterministic given cfg.seed; the per-epoch
    shuffle seed is derived from (seed, epoch) so a resumed run shuffles
    identically to an uninterrupted one.

    Returns (net, history, momentum_state); history holds per-epoch mean
    loss and the full per-step learning-rate trace.
    """
    if not samples:
        raise ValueError("empty training set")
    torch.manual_seed(cfg.seed)

    ys = torch.from_numpy(np.stack([s.observation.data for s in samples]))
    priors = torch.from_numpy(np.stack([s.prior_img.data for s in samples]))
    xs = torch.from_numpy(np.stack([s.target.data for s in samples]))
    fids = torch.from_numpy(np.stack([s.fidelity.data for s in samples]))

    opt = torch.optim.SGD(net.parameters(), lr=cfg.lr0, momentum=0.9)
    if momentum_state:
        named = dict(net.named_parameters())
        for group in opt.param_groups:
            for p in group["params"]:
                for name, ref in named.items():
                    if ref is p and name in momentum_state:
                        opt.state[p]["momentum_buffer"] = torch.from_numpy(
                            np.asarray(momentum_state[name])).to(p.dtype).reshape(p.shape)
    history = history or {"epoch_loss": [], "lr_trace": []}
    n = len(samples)
    num_batches = math.ceil(n / cfg.batch_size)

    net.train()
    for epoch in range(start_epoch, cfg.epochs):
        order = list(range(n))
        random.Random(f"{cfg.seed}:{epoch}").shuffle(order)
        epoch_losses = []
        for b in range(num_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = cosine_restart_lr(cfg.lr0, epoch, cfg.restart_epochs, b, num_batches)
            for group in opt.param_groups:
                group["lr"] = lr
            history["lr_trace"].append(lr)
            opt.zero_grad()
            loss = _batch_loss_t(net, ys[idx], fids[idx], priors[idx], xs[idx], cfg.rho)
            val = float(loss.detach())
            if not np.isfinite(val):
                raise TrainingDiverged(epoch, b)
            loss.backward()
            opt.step()
            epoch_losses.append(val)
        history["epoch_loss"].append(float(np.mean(epoch_losses)))

    momentum_out = {}
    for name, p in net.named_parameters():
        buf = opt.state.get(p, {}).get("momentum_buffer")
        if buf is not None:
            momentum_out[name] = buf.detach().cpu().numpy()
    return net, history, momentum_out


# ---------------------------------------------------------------------------
# Checkpointing: a directory with a JSON meta file and one portable float
# array per parameter tensor.
# ---------------------------------------------------------------------------

def save_checkpoint(path, net: PhiNet, train_cfg: TrainConfig, epoch: int,
                    history: dict, momentum_state: dict | None = None) -> None:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    names = []
    for name, tensor in net.state_dict().items():
        fname = name.replace(".", "__") + ".pfaf"
        save_array(path / "params" / fname,
                   tensor.detach().cpu().numpy().astype(np.float64))
        names.append(name)
    momentum_names = []
    if momentum_state:
        (path / "momentum").mkdir(exist_ok=True)
        for name, arr in momentum_state.items():
            save_array(path / "momentum" / (name.replace(".", "__") + ".pfaf"),
                       np.asarray(arr, dtype=np.float64))
            momentum_names.append(name)
    meta = {
        "format": "phinet-checkpoint/1",
        "net_config": asdict(net.config),
        "train_config": asdict(train_cfg),
        "epoch": epoch,
        "history": history,
        "parameters": names,
        "momentum": momentum_names,
    }
    with open(path / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def load_checkpoint(path):
    """Returns (net, train_cfg, epoch, history, momentum_state)."""
    path = Path(path)
    with open(path / "meta.json") as fh:
        meta = json.load(fh)
    if meta.get("format") != "phinet-checkpoint/1":
        raise IOError(f"unrecognized checkpoint format in {path}")
    net = PhiNet(PhiNetConfig(**meta["net_config"]))
    state = {}
    for name in meta["parameters"]:
        arr = load_array(path / "params" / (name.replace(".", "__") + ".pfaf"))
        ref = net.state_dict()[name]
        state[name] = torch.from_numpy(np.asarray(arr)).to(ref.dtype).reshape(ref.shape)
    net.load_state_dict(state)
    momentum = {}
    for name in meta.get("momentum", []):
        momentum[name] = load_array(path / "momentum" / (name.replace(".", "__") + ".pfaf"))
    return net, TrainConfig(**meta["train_config"]), meta["epoch"], meta["history"], momentum
