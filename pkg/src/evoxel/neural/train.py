"""Minibatch training, checkpoints, and inference."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ..io import Manifest, ManifestEntry, read_events, read_voxels
from ..representation import AUGMENT_OPS, FrameStack, RepresentationConfig, augment
from ..voxels import VoxelGrid
from .functional import focal_loss
from .model import Network, NetworkConfig
from .optim import Adam, AdamState

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "EVCK1"


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 300
    batch_size: int = 5
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    probe_threshold: float = 0.3
    augment: tuple[str, ...] = ("flip_h",)
    augment_probability: float = 0.5
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        object.__setattr__(self, "augment", tuple(self.augment))
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        for op in self.augment:
            if op not in AUGMENT_OPS:
                raise ValueError(f"unknown augmentation {op!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSettings":
        _reject_unknown(cls, d)
        return cls(**d)


def _reject_unknown(cls, d: dict) -> None:
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")


@dataclass
class Sample:
    frames: FrameStack  # raw planes, before sobel/resize
    label: VoxelGrid
    category: str


def load_samples(entries: Sequence[ManifestEntry], representation: RepresentationConfig) -> list[Sample]:
    out = []
    for e in entries:
        stream = read_events(e.events)
        out.append(Sample(representation.frames(stream), read_voxels(e.voxels), e.category))
    return out


def _batch(samples: Sequence[Sample], representation: RepresentationConfig, dtype, aug=None):
    xs, ys = [], []
    for i, s in enumerate(samples):
        stack, label = s.frames, s.label
        if aug is not None:
            ops, seed, prob = aug[i]
            stack, label = augment(stack, label, ops, seed, prob)
        xs.append(representation.finish(stack))
        ys.append(label.occupancy)
    return np.stack(xs).astype(dtype), np.stack(ys)


@dataclass
class Checkpoint:
    network: Network
    optimizer: AdamState
    epoch: int
    seed: int
    representation: RepresentationConfig
    settings: TrainSettings
    history: list[dict] = field(default_factory=list)


class NonFiniteLossError(RuntimeError):
    pass


class Trainer:
    """Owns the network and optimizer state. Epoch ``e`` draws its batch order,
    augmentation seeds and dropout masks from ``default_rng([seed, e])``, so a
    resumed run continues exactly like an uninterrupted one."""

    def __init__(self, train_samples, network_config: NetworkConfig, settings: TrainSettings,
                 representation: RepresentationConfig, seed: int, val_samples=None, checkpoint: Optional[Checkpoint] = None):
        if not train_samples:
            raise ValueError("training split is empty")
        if network_config.in_channels != representation.channels:
            raise ValueError(
                f"network expects {network_config.in_channels} input channels, "
                f"{representation.mode} frames give {representation.channels}"
            )
        res = train_samples[0].label.resolution
        if res != network_config.resolution:
            raise ValueError(f"labels are {res}^3 but the network outputs {network_config.resolution}^3")
        self.train_samples = list(train_samples)
        self.val_samples = list(val_samples or [])
        self.settings, self.representation, self.seed = settings, representation, int(seed)
        self.dtype = np.dtype(settings.dtype)
        if checkpoint is None:
            self.network = Network(network_config, seed=self.seed, dtype=self.dtype)
            self.optimizer = Adam(self.network, settings.lr, settings.betas, settings.eps)
            self.epoch = 0
            self.history: list[dict] = []
        else:
            self.network = checkpoint.network
            self.optimizer = Adam(self.network, settings.lr, settings.betas, settings.eps)
            self.optimizer.state = checkpoint.optimizer
            self.epoch = checkpoint.epoch
            self.history = list(checkpoint.history)
        self._val_batch = None

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.network, self.optimizer.state, self.epoch, self.seed,
                          self.representation, self.settings, list(self.history))

    def run_epoch(self) -> dict:
        s = self.settings
        epoch = self.epoch + 1
        rng = np.random.default_rng([self.seed, epoch])
        order = rng.permutation(len(self.train_samples))
        aug_seeds = rng.integers(0, 2**63, size=len(order))
        self.network.dropout.rng = np.random.default_rng(rng.integers(0, 2**63))
        self.network.train()
        total, count = 0.0, 0
        for start in range(0, len(order), s.batch_size):
            idx = order[start : start + s.batch_size]
            aug = [(s.augment, int(aug_seeds[start + j]), s.augment_probability) for j in range(len(idx))] if s.augment else None
            x, y = _batch([self.train_samples[i] for i in idx], self.representation, self.dtype, aug)
            self.network.zero_grad()
            logits = self.network.forward(x)
            loss, grad = focal_loss(logits, y, s.focal_alpha, s.focal_gamma)
            if not math.isfinite(loss):
                raise NonFiniteLossError(self._diagnose(epoch, start, logits, loss))
            self.network.backward(grad)
            self.optimizer.step()
            total += loss * len(idx)
            count += len(idx)
        self.epoch = epoch
        row = {"epoch": epoch, "loss": total / count}
        if self.val_samples:
            row["val_miou"] = self.validate()
        self.history.append(row)
        return row

    def _diagnose(self, epoch, start, logits, loss) -> str:
        bad = [n for n, mod, k in self.network.named_parameters() if not np.isfinite(mod.params[k]).all()]
        finite = logits[np.isfinite(logits)]
        span = f"[{finite.min():.3g}, {finite.max():.3g}]" if finite.size else "all non-finite"
        return (
            f"non-finite loss {loss} at epoch {epoch}, batch starting at sample {start}; "
            f"finite logit range {span}, "
            f"non-finite parameters: {bad or 'none'}"
        )

    def validate(self) -> float:
        from ..evaluation import binarize, mean_iou

        if self._val_batch is None:
            self._val_batch = _batch(self.val_samples, self.representation, self.dtype)
        x, y = self._val_batch
        logits = predict(self.network, x, self.settings.batch_size)
        preds = [binarize(z, self.settings.probe_threshold) for z in logits]
        return mean_iou(preds, list(y), [s.category for s in self.val_samples])

    def fit(self, epochs: int, callback: Optional[Callable[[dict], None]] = None) -> list[dict]:
        for _ in range(epochs):
            row = self.run_epoch()
            log.info("epoch %d loss %.6g%s", row["epoch"], row["loss"],
                     f" val mIoU {row['val_miou']:.4f}" if "val_miou" in row else "")
            if callback is not None:
                callback(row)
        return self.history


def predict(network: Network, x: np.ndarray, batch_size: int = 5) -> np.ndarray:
    """Eval-mode logits (N, D, D, D)."""
    network.eval()
    outs = [network.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0,) + (network.config.resolution,) * 3)


def train(manifest: Manifest, network_config: NetworkConfig, epochs: int, batch_size: int, seed: int, *,
          representation: RepresentationConfig = RepresentationConfig(), settings: Optional[TrainSettings] = None,
          out_dir=None, resume=None, checkpoint_every: int = 0) -> Checkpoint:
    """Train on the manifest's ``train`` split, validating on ``val`` each epoch.

    With ``resume`` (a checkpoint directory) training continues from its
    epoch up to ``epochs`` total. ``out_dir`` receives the final checkpoint,
    and an intermediate one every ``checkpoint_every`` epochs when > 0.
    """
    settings = settings or TrainSettings()
    settings = TrainSettings(**{**settings.to_dict(), "epochs": epochs, "batch_size": batch_size})
    ckpt = None
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.seed != seed or ckpt.network.config != network_config:
            raise ValueError("resume checkpoint was trained with a different seed or network config")
        representation = ckpt.representation
    train_entries = manifest.split("train")
    if not train_entries:
        raise ValueError("manifest has an empty train split")
    trainer = Trainer(
        load_samples(train_entries, representation), network_config, settings, representation, seed,
        val_samples=load_samples(manifest.split("val"), representation), checkpoint=ckpt,
    )

    def maybe_save(row):
        if out_dir is not None and checkpoint_every and row["epoch"] % checkpoint_every == 0:
            save_checkpoint(trainer.checkpoint(), out_dir)

    trainer.fit(max(0, epochs - trainer.epoch), maybe_save)
    result = trainer.checkpoint()
    if out_dir is not None:
        save_checkpoint(result, out_dir)
    return result


# ---------------------------------------------------------------------------
# checkpoint container: checkpoint.json + params.bin (little-endian f32 blobs)


def _blobs(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    net = ckpt.network
    out = [(f"param/{n}", m.params[k]) for n, m, k in net.named_parameters()]
    out += [(f"buffer/{n}", m.buffers[k]) for n, m, k in net.named_buffers()]
    for name in sorted(ckpt.optimizer.m):
        out.append((f"adam_m/{name}", ckpt.optimizer.m[name]))
        out.append((f"adam_v/{name}", ckpt.optimizer.v[name]))
    return out


def save_checkpoint(ckpt: Checkpoint, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest, chunks, offset = [], [], 0
    for name, arr in _blobs(ckpt):
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        chunks.append(data)
        offset += len(data)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "network": ckpt.network.config.to_dict(),
        "representation": asdict(ckpt.representation),
        "training": ckpt.settings.to_dict(),
        "optimizer": {"type": "adam", "step": ckpt.optimizer.step, "lr": ckpt.settings.lr,
                      "betas": list(ckpt.settings.betas), "eps": ckpt.settings.eps},
        "history": ckpt.history,
        "blobs": manifest,
        "params_bytes": offset,
    }
    (out / "params.bin").write_bytes(b"".join(chunks))
    (out / "checkpoint.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_checkpoint(path) -> Checkpoint:
    root = Path(path)
    if root.is_file():
        root = root.parent
    meta = json.loads((root / "checkpoint.json").read_text())
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{root}: unsupported checkpoint format {meta.get('format')!r}")
    payload = (root / "params.bin").read_bytes()
    if len(payload) != meta["params_bytes"]:
        raise ValueError(f"{root}/params.bin: expected {meta['params_bytes']} bytes, found {len(payload)}")
    settings = TrainSettings.from_dict(meta["training"])
    net = Network(NetworkConfig.from_dict(meta["network"]), dtype=np.dtype(settings.dtype), materialize=False)
    arrays = {}
    for b in meta["blobs"]:
        n = int(np.prod(b["shape"], dtype=np.int64))
        arrays[b["name"]] = np.frombuffer(payload, dtype="<f4", count=n, offset=b["offset"]).reshape(b["shape"])
    net.load_state({k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith(("param/", "buffer/"))})
    dtype = np.dtype(settings.dtype)
    opt = AdamState(step=meta["optimizer"]["step"])
    for k, v in arrays.items():
        kind, name = k.split("/", 1)
        if kind == "adam_m":
            opt.m[name] = v.astype(dtype)
        elif kind == "adam_v":
            opt.v[name] = v.astype(dtype)
    rep = RepresentationConfig(**meta["representation"])
    return Checkpoint(net, opt, meta["epoch"], meta["seed"], rep, settings, meta.get("history", []))


def infer_entries(ckpt: Checkpoint, entries: Sequence[ManifestEntry]) -> tuple[list[np.ndarray], list[VoxelGrid]]:
    """Logits and labels for each manifest entry."""
    samples = load_samples(entries, ckpt.representation)
    x = np.stack([ckpt.representation.finish(s.frames) for s in samples]).astype(ckpt.network.dtype)
    logits = predict(ckpt.network, x, ckpt.settings.batch_size)
    for s, z in zip(samples, logits):
        if s.label.resolution != z.shape[0]:
            raise ValueError(f"label resolution {s.label.resolution} does not match prediction {z.shape[0]}")
    return list(logits), [s.label for s in samples]
