"""SGD with momentum and weight decay, the training loop, and the EGSC checkpoint container."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import Config, config_from_dict
from .data import AugmentationConfig, DatasetManifest, Sample, augment, load_sample
from .errors import ConfigError, DimensionError, FormatError, ShapeMismatchError
from .fsutil import atomic_write_bytes, atomic_write_text
from .model import EGSModel
from .objectives import LossValue, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"EGSC"
CHECKPOINT_VERSION = 1
LOSS_HEADER = "step,total,infonce,ce"
NEW_LAYER_PREFIXES = ("gnn.", "head.")
BACKBONE_PREFIX = "backbone."


# --- optimizer ------------------------------------------------------------

@dataclass
class LrGroups:
    backbone: float = 0.001
    new_layers: float = 0.01

    def group_of(self, name: str) -> str:
        """Group membership by tensor-name prefix; every trainable tensor must land somewhere."""
        if name.startswith(BACKBONE_PREFIX):
            return "backbone"
        if name.startswith(NEW_LAYER_PREFIXES):
            return "new_layers"
        raise ConfigError(f"tensor {name!r} belongs to no learning-rate group")

    def lr_for(self, name: str) -> float:
        return getattr(self, self.group_of(name))


@dataclass
class OptimizerState:
    groups: LrGroups = field(default_factory=LrGroups)
    momentum: float = 0.9
    weight_decay: float = 0.0005
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: dict[str, nx.Tensor], grads: dict[str, np.ndarray], state: OptimizerState) -> None:
    """In-place update with weight decay folded into the momentum buffer.

    ``g' = g + wd * p``; ``v = mu * v + g'``; ``p = p - lr * v``.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        buf = state.buffers.get(name)
        if buf is not None and buf.shape != p.shape:
            raise DimensionError(f"momentum buffer for {name} has shape {buf.shape}, parameter {p.shape}")
        dt = p.data.dtype.type
        g = g + dt(state.weight_decay) * p.data
        v = g if buf is None else dt(state.momentum) * buf + g
        state.buffers[name] = v.astype(p.data.dtype)
        p.data = p.data - dt(state.groups.lr_for(name)) * state.buffers[name]


# --- checkpoints ----------------------------------------------------------

_PREFIX = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    step: int = 0
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def to_bytes(self) -> bytes:
        offset = 0
        index = {}
        payloads = []
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f4")
            index[name] = {"dtype": "f32", "shape": list(arr.shape), "offset": offset}
            payloads.append(arr.tobytes())
            offset += arr.nbytes
        meta = {"step": self.step, "config": self.config, "extra": self.extra, "tensors": index}
        blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return _PREFIX.pack(CHECKPOINT_MAGIC, self.version, len(blob)) + blob + b"".join(payloads)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < _PREFIX.size:
            raise FormatError("checkpoint truncated before header end")
        magic, version, meta_len = _PREFIX.unpack_from(data)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        start = _PREFIX.size + meta_len
        if len(data) < start:
            raise FormatError("checkpoint truncated inside metadata")
        try:
            meta = json.loads(data[_PREFIX.size:start].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"checkpoint metadata unreadable: {exc}") from None
        payload = memoryview(data)[start:]
        tensors = {}
        for name, info in meta["tensors"].items():
            if info.get("dtype") != "f32":
                raise FormatError(f"tensor {name} has unsupported dtype {info.get('dtype')}")
            count = int(np.prod(info["shape"], dtype=np.int64))
            end = info["offset"] + 4 * count
            if end > len(payload):
                raise FormatError(f"checkpoint truncated inside tensor {name}")
            tensors[name] = np.frombuffer(payload[info["offset"]:end], dtype="<f4").reshape(info["shape"]).copy()
        expected = max((i["offset"] + 4 * int(np.prod(i["shape"], dtype=np.int64))
                        for i in meta["tensors"].values()), default=0)
        if len(payload) != expected:
            raise FormatError(f"checkpoint payload is {len(payload)} bytes, index implies {expected}")
        return cls(tensors, meta["step"], meta["config"], meta.get("extra", {}), version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write_bytes(Path(path), ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def snapshot(model: EGSModel, state: OptimizerState, step: int, config: Config) -> Checkpoint:
    tensors = {name: np.asarray(arr) for name, arr in model.state().items()}
    for name, buf in state.buffers.items():
        tensors[f"optim.momentum.{name}"] = buf
    extra = {"num_classes": model.num_classes, "class_ids": list(getattr(model, "class_ids", []))}
    return Checkpoint(tensors, step, config.to_dict(), extra)


def restore(ckpt: Checkpoint, model: EGSModel, state: OptimizerState | None = None) -> None:
    """Copy checkpoint tensors into ``model`` (and ``state``), validating everything first.

    Nothing is mutated unless every expected tensor is present with the right shape.
    """
    expected = {name: np.shape(arr) for name, arr in model.state().items()}
    problems = []
    for name, shape in expected.items():
        if name not in ckpt.tensors:
            problems.append(f"missing tensor {name}")
        elif tuple(ckpt.tensors[name].shape) != tuple(shape):
            problems.append(f"shape mismatch for {name}: checkpoint {tuple(ckpt.tensors[name].shape)}, model {tuple(shape)}")
    if problems:
        raise ShapeMismatchError("; ".join(problems))
    momentum = {}
    if state is not None:
        params = model.parameters()
        for key, arr in ckpt.tensors.items():
            if key.startswith("optim.momentum."):
                name = key[len("optim.momentum."):]
                if name not in params or params[name].shape != arr.shape:
                    raise ShapeMismatchError(f"optimizer buffer {key} does not match the model")
                momentum[name] = arr.astype(params[name].data.dtype)
    model.load_state({k: v for k, v in ckpt.tensors.items() if k in expected})
    model.class_ids = list(ckpt.extra.get("class_ids", []))
    if state is not None:
        state.buffers = momentum


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[EGSModel, Config]:
    config = config_from_dict(ckpt.config)
    model = EGSModel(config.model, int(ckpt.extra.get("num_classes", 1)))
    restore(ckpt, model)
    return model, config


# --- training loop --------------------------------------------------------

@dataclass
class TrainResult:
    model: EGSModel
    state: OptimizerState
    losses: list[tuple[int, float, float, float]]
    checkpoints: list[Path]


def steps_per_epoch(manifest: DatasetManifest, batch_size: int) -> int:
    n = len(manifest.images("drone"))
    return max(1, math.ceil(n / batch_size))


def total_steps(manifest: DatasetManifest, config: Config) -> int:
    if config.train.max_steps is not None:
        return config.train.max_steps
    return config.train.epochs * steps_per_epoch(manifest, config.train.batch_size)


class PairSampler:
    """Class-balanced batches of (drone, satellite) pairs, fully determined by (seed, step)."""

    def __init__(self, manifest: DatasetManifest, config: Config):
        self.config = config
        self.side = config.train.image_side
        self.class_ids = manifest.class_ids
        self.index = {cid: i for i, cid in enumerate(self.class_ids)}
        self.cache: dict[Path, Sample] = {}
        self.paths = {c.class_id: c.images for c in manifest.classes}
        a = config.augment
        self.aug = AugmentationConfig(a.rotate90, a.hflip, a.crop_fraction, config.train.seed)

    def _sample(self, path: Path, cid: int, view: str) -> Sample:
        if path not in self.cache:
            self.cache[path] = load_sample(path, cid, view, self.side)
        return self.cache[path]

    def batch(self, step: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        seed, B = self.config.train.seed, self.config.train.batch_size
        rng = np.random.default_rng([seed, step, 0])
        chosen = rng.choice(len(self.class_ids), size=B, replace=False)
        drones, sats = [], []
        for slot, ci in enumerate(chosen):
            cid = self.class_ids[ci]
            views = []
            for v_index, view in enumerate(("drone", "satellite")):
                srng = np.random.default_rng([seed, step, 1 + slot, v_index])
                paths = self.paths[cid][view]
                sample = self._sample(paths[int(srng.integers(len(paths)))], cid, view)
                views.append(augment(sample, self.aug, srng).image)
            drones.append(views[0])
            sats.append(views[1])
        dtype = nx.default_dtype()
        return (np.stack(drones).astype(dtype), np.stack(sats).astype(dtype), chosen.astype(np.int64))


def train_step(model: EGSModel, state: OptimizerState, drones, sats, labels, temperature) -> LossValue:
    params = model.parameters()
    for p in params.values():
        p.grad = None
    B = len(labels)
    z = model.descriptors(np.concatenate([drones, sats]), train=True)
    logits = model.logits(z)
    U, V = z[:B], z[B:]
    loss = total_loss(U, V, logits[:B], logits[B:], labels, temperature)
    loss.total.backward()
    sgd_step(params, {n: p.grad for n, p in params.items()}, state)
    return loss


def latest_checkpoint(out_dir) -> Path | None:
    found = []
    for p in Path(out_dir).glob("ckpt_*.egsc"):
        try:
            found.append((int(p.stem.split("_", 1)[1]), p))
        except ValueError:
            continue
    return max(found)[1] if found else None


def _read_loss_log(path: Path, upto: int) -> list[str]:
    if not path.exists():
        return []
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line == LOSS_HEADER or not line:
            continue
        if int(line.split(",", 1)[0]) <= upto:
            rows.append(line)
    return rows


def format_loss_row(step: int, loss: LossValue) -> str:
    total, nce, ce = loss.values()
    return f"{step},{total:.9g},{nce:.9g},{ce:.9g}"


def train(manifest: DatasetManifest, config: Config, out_dir=None, resume: bool = False,
          progress=None) -> TrainResult:
    """Run SGD on class-balanced cross-view pairs.

    Writes ``loss.log`` and ``ckpt_{step}.egsc`` under ``out_dir`` when given.
    With ``resume`` the newest checkpoint there is reloaded and the loss log is
    cut back to it, so a resumed run reproduces the uninterrupted one.
    """
    config.validate()
    B = config.train.batch_size
    if len(manifest.classes) == 0:
        raise ConfigError("no paired training classes in the manifest")
    if B > len(manifest.classes):
        raise ConfigError(f"batch size {B} exceeds the {len(manifest.classes)} paired classes")
    with nx.precision("f32"):
        model = EGSModel(config.model, len(manifest.classes))
        model.class_ids = manifest.class_ids
        o = config.optim
        state = OptimizerState(LrGroups(o.lr_backbone, o.lr_new), o.momentum, o.weight_decay)
        start = 0
        out = Path(out_dir) if out_dir is not None else None
        rows: list[str] = []
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            atomic_write_text(out / "config.json", config.to_json() + "\n")
            if resume:
                ckpt_path = latest_checkpoint(out)
                if ckpt_path is not None:
                    ckpt = load_checkpoint(ckpt_path)
                    restore(ckpt, model, state)
                    start = ckpt.step
                    rows = _read_loss_log(out / "loss.log", start)
                    log.info("resumed from %s at step %d", ckpt_path, start)
        sampler = PairSampler(manifest, config)
        steps = total_steps(manifest, config)
        losses, ckpts = [], []
        log_fh = None
        if out is not None:
            log_fh = open(out / "loss.log", "w", encoding="utf-8")
            log_fh.write(LOSS_HEADER + "\n")
            for row in rows:
                log_fh.write(row + "\n")
            log_fh.flush()
        try:
            for step in range(start + 1, steps + 1):
                drones, sats, labels = sampler.batch(step)
                loss = train_step(model, state, drones, sats, labels, config.train.temperature)
                total, nce, ce = loss.values()
                losses.append((step, total, nce, ce))
                if log_fh is not None:
                    log_fh.write(format_loss_row(step, loss) + "\n")
                    log_fh.flush()
                if progress is not None:
                    progress(step, steps, loss)
                if out is not None and (step % config.train.checkpoint_every == 0 or step == steps):
                    path = out / f"ckpt_{step}.egsc"
                    save_checkpoint(path, snapshot(model, state, step, config))
                    ckpts.append(path)
        finally:
            if log_fh is not None:
                log_fh.close()
    return TrainResult(model, state, losses, ckpts)
