"""Restoration network and checkpoint files.

The reference network is a small residual UNet: ``restore(x) = x + f(x)``.
Normalization layers use per-sample (instance) statistics so inference is
independent of batch composition.

Checkpoint file layout::

    b"UCMRCKPT" | u32 version | u32 manifest length | manifest JSON (UTF-8) | payload

The payload is every parameter tensor, in manifest order, as contiguous
little-endian float32. The manifest stores names, shapes, byte offsets and a
SHA-256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import ChecksumError, IncompatibleCheckpoint, InvalidArgument, InvalidInput

CKPT_MAGIC = b"UCMRCKPT"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sII")
HEAD_INIT_SCALE = 0.01


@dataclass(frozen=True)
class ArchitectureConfig:
    depth: int = 3
    base_channels: int = 16
    grid_size: int = 64

    def validate(self):
        if not 2 <= self.depth <= 4:
            raise InvalidArgument(f"depth must be in [2, 4], got {self.depth}")
        if not 8 <= self.base_channels <= 64:
            raise InvalidArgument(f"base_channels must be in [8, 64], got {self.base_channels}")
        if self.grid_size % (2**self.depth) != 0:
            raise InvalidArgument(f"grid_size {self.grid_size} is not divisible by 2**{self.depth}")
        return self

    @property
    def channels(self):
        return [self.base_channels * 2**i for i in range(self.depth + 1)]


def _conv_unit(c_in, c_out, stride=1):
    return [
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
        nn.InstanceNorm2d(c_out, affine=True),
        nn.ReLU(inplace=True),
    ]


def _double_conv(c_in, c_out):
    return nn.Sequential(*_conv_unit(c_in, c_out), *_conv_unit(c_out, c_out))


class UNet(nn.Module):
    """Encoder-decoder with stride-2 downsampling and a skip at every level."""

    def __init__(self, config: ArchitectureConfig):
        super().__init__()
        self.config = config.validate()
        c = config.channels
        self.stem = _double_conv(1, c[0])
        self.down = nn.ModuleList(
            nn.Sequential(*_conv_unit(c[i - 1], c[i], stride=2), *_conv_unit(c[i], c[i]), *_conv_unit(c[i], c[i]))
            for i in range(1, config.depth + 1)
        )
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(c[i], c[i - 1], 2, stride=2) for i in range(config.depth, 0, -1)
        )
        self.decode = nn.ModuleList(_double_conv(2 * c[i - 1], c[i - 1]) for i in range(config.depth, 0, -1))
        self.head = nn.Conv2d(c[0], 1, 1)

    def forward(self, x):
        h = self.stem(x)
        skips = [h]
        for block in self.down:
            h = block(h)
            skips.append(h)
        skips.pop()
        for up, block in zip(self.up, self.decode):
            h = block(torch.cat([up(h), skips.pop()], dim=1))
        return x + self.head(h)


def _init_weights(model, generator):
    for module in model.modules():
        if isinstance(module, nn.Conv2d):
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
        elif isinstance(module, nn.ConvTranspose2d):
            # each output pixel sees one kernel tap per input channel at stride 2, kernel 2
            fan_in = module.in_channels
        elif isinstance(module, nn.InstanceNorm2d):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)
            continue
        else:
            continue
        std = math.sqrt(2.0 / fan_in)
        if module is model.head:
            # small correction at init so restore() starts close to the identity
            std *= HEAD_INIT_SCALE
        with torch.no_grad():
            module.weight.normal_(0.0, std, generator=generator)
            if module.bias is not None:
                module.bias.zero_()


def build_unet(config: ArchitectureConfig, seed: int = 0) -> UNet:
    model = UNet(config)
    _init_weights(model, torch.Generator().manual_seed(seed))
    return model


def parameter_count(model):
    return sum(p.numel() for p in model.parameters())


def _as_batch(image, model):
    param = next(model.parameters())
    t = torch.as_tensor(np.asarray(image), dtype=param.dtype)
    if t.ndim != 2:
        raise InvalidArgument(f"expected a 2-D image, got shape {tuple(t.shape)}")
    return t[None, None]


def restore(model: UNet, image) -> np.ndarray:
    """Run the network on one H x W image in inference mode."""
    image = np.asarray(image)
    n = model.config.grid_size
    if image.shape != (n, n):
        raise InvalidArgument(f"image shape {image.shape} does not match model grid {n}")
    model.eval()
    with torch.no_grad():
        out = model(_as_batch(image, model))
    return out[0, 0].numpy()


def restore_batch(model: UNet, images) -> np.ndarray:
    """Restore an (N, H, W) stack."""
    images = np.asarray(images)
    n = model.config.grid_size
    if images.ndim != 3 or images.shape[1:] != (n, n):
        raise InvalidArgument(f"stack shape {images.shape} does not match model grid {n}")
    param = next(model.parameters())
    model.eval()
    with torch.no_grad():
        out = model(torch.as_tensor(images, dtype=param.dtype)[:, None])
    return out[:, 0].numpy()


# --------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    epoch: int
    path: Path
    architecture: ArchitectureConfig
    train_loss: float
    rng_state_tag: str
    checksum: str


def save_checkpoint(model: UNet, epoch: int, path, train_loss=float("nan"), rng_state_tag="") -> Checkpoint:
    if epoch < 1:
        raise InvalidArgument(f"checkpoint epoch must be >= 1, got {epoch}")
    tensors, chunks, offset = [], [], 0
    for name, param in model.state_dict().items():
        data = param.detach().cpu().numpy().astype("<f4", copy=False)
        raw = np.ascontiguousarray(data).tobytes()
        tensors.append({"name": name, "shape": list(data.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    checksum = hashlib.sha256(payload).hexdigest()
    manifest = {
        "architecture": asdict(model.config),
        "epoch": int(epoch),
        "train_loss": None if not math.isfinite(train_loss) else float(train_loss),
        "rng_state_tag": rng_state_tag,
        "tensors": tensors,
        "checksum": checksum,
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)))
        f.write(blob)
        f.write(payload)
    return Checkpoint(
        epoch=int(epoch),
        path=path,
        architecture=model.config,
        train_loss=float(train_loss),
        rng_state_tag=rng_state_tag,
        checksum=checksum,
    )


def _read(path):
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEADER.size:
        raise ChecksumError(f"{path}: truncated checkpoint")
    magic, version, mlen = _CKPT_HEADER.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise ChecksumError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise IncompatibleCheckpoint(f"{path}: unsupported checkpoint version {version}")
    start = _CKPT_HEADER.size
    try:
        manifest = json.loads(data[start : start + mlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"{path}: unreadable manifest") from exc
    payload = data[start + mlen :]
    if hashlib.sha256(payload).hexdigest() != manifest.get("checksum"):
        raise ChecksumError(f"{path}: payload checksum mismatch")
    return manifest, payload


def read_checkpoint(path) -> Checkpoint:
    manifest, _ = _read(path)
    loss = manifest["train_loss"]
    return Checkpoint(
        epoch=manifest["epoch"],
        path=Path(path),
        architecture=ArchitectureConfig(**manifest["architecture"]),
        train_loss=float("nan") if loss is None else loss,
        rng_state_tag=manifest["rng_state_tag"],
        checksum=manifest["checksum"],
    )


def load_checkpoint(path, expected: ArchitectureConfig | None = None) -> UNet:
    """Rebuild the model stored at ``path``.

    ``expected`` is the architecture the caller believes the file holds; a
    mismatch raises :class:`IncompatibleCheckpoint`.
    """
    manifest, payload = _read(path)
    arch = ArchitectureConfig(**manifest["architecture"])
    if expected is not None and expected != arch:
        raise IncompatibleCheckpoint(f"{path}: holds {arch}, expected {expected}")
    model = UNet(arch)
    state = model.state_dict()
    names = [t["name"] for t in manifest["tensors"]]
    if names != list(state):
        raise IncompatibleCheckpoint(f"{path}: tensor names do not match the architecture")
    loaded = {}
    for entry in manifest["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
        if tuple(arr.shape) != tuple(state[entry["name"]].shape):
            raise IncompatibleCheckpoint(f"{path}: shape mismatch for {entry['name']}")
        loaded[entry["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(loaded)
    model.eval()
    return model


class CheckpointSet:
    """Early-epoch checkpoints in strictly increasing epoch order (at least two)."""

    def __init__(self, checkpoints):
        checkpoints = list(checkpoints)
        if len(checkpoints) < 2:
            raise InvalidArgument(f"a checkpoint set needs at least 2 members, got {len(checkpoints)}")
        epochs = [c.epoch for c in checkpoints]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise InvalidArgument(f"checkpoint epochs must be strictly increasing, got {epochs}")
        archs = {c.architecture for c in checkpoints}
        if len(archs) != 1:
            raise IncompatibleCheckpoint(f"checkpoint set mixes architectures: {archs}")
        self.checkpoints = checkpoints

    def __len__(self):
        return len(self.checkpoints)

    def __iter__(self):
        return iter(self.checkpoints)

    @property
    def epochs(self):
        return [c.epoch for c in self.checkpoints]

    @property
    def architecture(self):
        return self.checkpoints[0].architecture

    def load_models(self):
        return [load_checkpoint(c.path, self.architecture) for c in self.checkpoints]

    @classmethod
    def from_paths(cls, paths):
        return cls(sorted((read_checkpoint(p) for p in paths), key=lambda c: c.epoch))


def checkpoint_valid(path):
    try:
        _read(path)
    except (ChecksumError, IncompatibleCheckpoint, InvalidInput, OSError):
        return False
    return True
