"""Training loop, configuration files, checkpoints and encoding."""
from __future__ import annotations

import configparser
import dataclasses
import io
import json
import logging
import math
import os
import struct
import typing
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import no_grad
from .data import AugmentConfig, Dataset, SplitConfig, augment
from .dual_stream import DualStreamConfig, HashVectorSet, HashModel
from .errors import ConfigError, FormatError
from .loss import LossConfig, SimilarityBatch, total_loss
from .optim import SGD, SgdConfig
from .retrieval import HashCode, binarize
from .vit import BackboneConfig

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    dual_stream: DualStreamConfig = field(default_factory=DualStreamConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    batch_size: int = 16
    seed: int = 0

    def validate(self) -> None:
        self.backbone.validate()
        self.dual_stream.validate(self.backbone.num_patches)
        if self.dual_stream.feature_dim not in (None, self.backbone.embed_dim):
            raise ConfigError(
                f"dual_stream.feature_dim={self.dual_stream.feature_dim} differs from "
                f"backbone.embed_dim={self.backbone.embed_dim}"
            )
        self.loss.validate()
        self.sgd.validate()
        self.augment.validate()
        self.split.validate()
        if self.batch_size < 2:
            raise ConfigError(f"train.batch_size must be >= 2 to form pairs, got {self.batch_size}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        cfg = cls()
        for section in SECTIONS:
            for key, value in d.get(section, {}).items():
                _assign(getattr(cfg, section), section, key, value)
        for key in ("batch_size", "seed"):
            if key in d:
                _assign(cfg, "train", key, d[key])
        return cfg


SECTIONS = ("backbone", "dual_stream", "loss", "sgd", "augment", "split")


def desk_config(**overrides) -> TrainConfig:
    """Laptop-scale defaults: 16x16 images, P=4, D=32, 4 blocks, 4 heads, B=16, K=2.

    The loss only sees hash directions, so the learning rate mostly sets how
    far weight norms drift; 1e-3 keeps the codes close to +-1.
    """
    cfg = TrainConfig()
    cfg.sgd.base_lr = 1e-3
    cfg.sgd.warmup_steps = 100
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


# -- config files ------------------------------------------------------------


def _coerce(value, typ, where: str):
    origin = typing.get_origin(typ)
    if origin is typing.Union or (origin is not None and type(None) in typing.get_args(typ)):
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if value is None or (isinstance(value, str) and value.strip().lower() in ("", "none")):
            return None
        typ = args[0]
    try:
        if typ is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            if isinstance(value, str):
                return int(value.strip())
            return int(value)
        if typ is float:
            return float(value)
        return str(value).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: cannot parse {value!r} as {typ.__name__}") from None


def _assign(target, section: str, key: str, value) -> None:
    hints = typing.get_type_hints(type(target))
    names = {f.name for f in dataclasses.fields(target)} - set(SECTIONS)
    if key not in names:
        raise ConfigError(f"unknown config field {section}.{key}")
    setattr(target, key, _coerce(value, hints[key], f"{section}.{key}"))


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Read an INI-style config; every field of every section is addressable.

    Sections: [backbone], [dual_stream], [loss], [sgd], [augment], [split]
    and [train] (batch_size, seed). Missing keys keep their defaults.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file: {exc}") from None
    cfg = base if base is not None else desk_config()
    for section in parser.sections():
        if section == "train":
            target = cfg
        elif section in SECTIONS:
            target = getattr(cfg, section)
        else:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            _assign(target, section, key, value)
    cfg.validate()
    return cfg


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def config_to_text(cfg: TrainConfig) -> str:
    parser = configparser.ConfigParser()
    parser["train"] = {"batch_size": str(cfg.batch_size), "seed": str(cfg.seed)}
    for section in SECTIONS:
        parser[section] = {k: str(v) for k, v in dataclasses.asdict(getattr(cfg, section)).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"THCK"
CKPT_VERSION = 1


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


@dataclass
class Checkpoint:
    """Model tensors, config, step counter, RNG state and optimizer buffers."""

    config: TrainConfig
    step: int
    params: dict[str, np.ndarray]
    rng_state: dict
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        """Layout (little-endian)::

            "THCK" | version u16 | len u32 + config JSON | step u64 | len u32 + RNG-state JSON
            | ntensors u32 | per tensor: len u16 + name | ndim u8 | ndim x u32 dims | float64 data
        """
        cfg = _canonical_json(self.config.to_dict())
        rng = _canonical_json(self.rng_state)
        parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(cfg)), cfg,
                 struct.pack("<QI", self.step, len(rng)), rng]
        tensors = list(self.params.items()) + [(f"optimizer/{k}", v) for k, v in self.optimizer.items()]
        parts.append(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            raw = name.encode()
            arr = np.asarray(arr, dtype="<f8")
            parts.append(struct.pack(f"<H{len(raw)}sB{arr.ndim}I", len(raw), raw, arr.ndim, *arr.shape))
            parts.append(arr.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> Checkpoint:
        view = memoryview(buf)
        pos = 0

        def need(n, what):
            if pos + n > len(view):
                raise FormatError(f"truncated checkpoint while reading {what}", pos)

        need(4, "magic")
        if bytes(view[:4]) != CKPT_MAGIC:
            raise FormatError(f"bad magic {bytes(view[:4])!r}, expected {CKPT_MAGIC!r}", 0)
        pos = 4
        need(6, "header")
        version, n = struct.unpack_from("<HI", view, pos)
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", pos)
        pos += 6
        need(n, "config")
        config = TrainConfig.from_dict(json.loads(bytes(view[pos:pos + n])))
        pos += n
        need(12, "step")
        step, n = struct.unpack_from("<QI", view, pos)
        pos += 12
        need(n, "rng state")
        rng_state = json.loads(bytes(view[pos:pos + n]))
        pos += n
        need(4, "tensor count")
        (count,) = struct.unpack_from("<I", view, pos)
        pos += 4
        params, optimizer = {}, {}
        for i in range(count):
            need(2, f"tensor {i} name")
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            need(nlen + 1, f"tensor {i} header")
            name = bytes(view[pos:pos + nlen]).decode()
            ndim = view[pos + nlen]
            pos += nlen + 1
            need(4 * ndim, f"tensor {name} shape")
            shape = struct.unpack_from(f"<{ndim}I", view, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            need(8 * size, f"tensor {name} data")
            arr = np.frombuffer(view, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
            if name.startswith("optimizer/"):
                optimizer[name[len("optimizer/"):]] = arr
            else:
                params[name] = arr
        if pos != len(view):
            raise FormatError(f"{len(view) - pos} trailing bytes", pos)
        return cls(config, int(step), params, rng_state, optimizer)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> Checkpoint:
        return cls.from_bytes(Path(path).read_bytes())

    def build_model(self) -> HashModel:
        model = HashModel(self.config.backbone, self.config.dual_stream, np.random.default_rng(0))
        named = dict(model.named_parameters())
        if set(named) != set(self.params):
            missing = sorted(set(named) ^ set(self.params))
            raise FormatError(f"checkpoint parameters do not match the model: {missing[:5]}", 0)
        for name, p in named.items():
            if p.shape != self.params[name].shape:
                raise FormatError(f"parameter {name}: shape {self.params[name].shape}, model wants {p.shape}", 0)
            p.data = self.params[name].copy()
        return model


# -- training ----------------------------------------------------------------


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, step: int, dump_path: str | None):
        super().__init__(message)
        self.step = step
        self.dump_path = dump_path


METRIC_FIELDS = ("step", "lr", "loss", "bayes", "quant", "bayes_per_pair", "quant_gap")


def quantization_gap(hset: HashVectorSet) -> float:
    """Mean of ||h| - 1| over every entry of the concatenated hash vectors."""
    values = np.concatenate([s.data for s in hset.streams], axis=-1)
    return float(np.abs(np.abs(values) - 1.0).mean())


def train(train_set: Dataset, cfg: TrainConfig,
          on_step: Callable[[dict], None] | None = None,
          dump_dir=None) -> tuple[Checkpoint, list[dict]]:
    """Optimise the full objective on ``train_set``; deterministic given ``cfg.seed``.

    Every step samples a batch without replacement, augments it, forms all
    in-batch pairs, and takes one SGD step. Returns the final checkpoint and
    one metrics record per step.
    """
    cfg.validate()
    s = cfg.backbone.image_size
    if train_set.shape != (s, s, cfg.backbone.channels):
        raise ConfigError(f"training images are {train_set.shape}, config expects {(s, s, cfg.backbone.channels)}")
    if len(train_set) < cfg.batch_size:
        raise ConfigError(f"training set has {len(train_set)} images, fewer than batch_size={cfg.batch_size}")

    rng = np.random.default_rng(cfg.seed)
    model = HashModel(cfg.backbone, cfg.dual_stream, rng)
    named = list(model.named_parameters())
    opt = SGD([p for _, p in named], cfg.sgd)
    images = train_set.images
    history = []
    for step in range(cfg.sgd.total_steps):
        pos = rng.choice(len(train_set), size=cfg.batch_size, replace=False)
        batch_images = np.stack([augment(images[i], cfg.augment, rng) for i in pos])
        labels = [train_set.labels[i] for i in pos]
        hset = model(batch_images)
        pairs = SimilarityBatch.from_labels(labels)
        loss, parts = total_loss(hset.streams, pairs, cfg.loss)
        value = loss.item()
        if not math.isfinite(value):
            dump = _dump_batch(dump_dir, step, pos, batch_images, labels, hset)
            raise TrainingDiverged(f"non-finite loss {value} at step {step}; batch dumped to {dump}", step, dump)
        opt.zero_grad()
        loss.backward()
        lr = opt.step(step)
        bayes = parts["bayes"].item()
        record = {
            "step": step,
            "lr": lr,
            "loss": value,
            "bayes": bayes,
            "quant": parts["quant"].item(),
            "bayes_per_pair": bayes / (pairs.num_pairs * len(hset.streams)),
            "quant_gap": quantization_gap(hset),
        }
        history.append(record)
        if on_step is not None:
            on_step(record)

    ckpt = Checkpoint(
        config=cfg,
        step=cfg.sgd.total_steps,
        params={name: p.data.copy() for name, p in named},
        rng_state=rng.bit_generator.state,
        optimizer=(
            {name: v.copy() for (name, _), v in zip(named, opt.velocity)} if opt.velocity is not None else {}
        ),
    )
    return ckpt, history


def _dump_batch(dump_dir, step, pos, images, labels, hset) -> str | None:
    if dump_dir is None:
        return None
    path = Path(dump_dir) / f"diverged_step{step}.npz"
    np.savez(
        path,
        positions=np.asarray(pos),
        images=images,
        labels=np.array([lab[0] for lab in labels]),
        **{f"stream{i}": s.data for i, s in enumerate(hset.streams)},
    )
    return str(path)


def write_metrics_csv(history: list[dict], path) -> None:
    lines = [",".join(METRIC_FIELDS)]
    for rec in history:
        lines.append(",".join(repr(rec[k]) if isinstance(rec[k], float) else str(rec[k]) for k in METRIC_FIELDS))
    Path(path).write_text("\n".join(lines) + "\n")


# -- encoding ----------------------------------------------------------------


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("THASH_THREADS", "1")))
    except ValueError:
        return 1


def encode(model_or_ckpt, images: np.ndarray, chunk: int = 64, return_vectors: bool = False):
    """Hash codes for a stack of images (no augmentation).

    Returns a list of :class:`HashCode`, plus the continuous (n, B) hash
    vectors when ``return_vectors`` is set.
    """
    model = model_or_ckpt.build_model() if isinstance(model_or_ckpt, Checkpoint) else model_or_ckpt
    cfg = model.backbone_cfg
    images = np.asarray(images, dtype=np.float64)
    expected = (cfg.image_size, cfg.image_size, cfg.channels)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ConfigError(f"images have shape {images.shape}, the model expects (n, {expected})")
    starts = list(range(0, len(images), chunk))

    def run(start):
        hset = model(images[start:start + chunk])
        return np.concatenate([s.data for s in hset.streams], axis=-1)

    threads = _thread_count()
    with no_grad():
        if threads > 1 and len(starts) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(run, starts))
        else:
            parts = [run(s) for s in starts]
    vectors = np.concatenate(parts, axis=0) if parts else np.zeros((0, model.dual_cfg.hash_bits))
    codes = binarize([vectors], expected_bits=model.dual_cfg.hash_bits) if len(vectors) else []
    return (codes, vectors) if return_vectors else codes
