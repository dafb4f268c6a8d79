"""Knowledge transfer: hint provisioning, adaptation layer, stage schedule.

Stage I mixes a teacher-bottleneck matching loss into training with weight
lambda decaying linearly from 1 to 0 over the first delta*E epochs; Stage II
(lambda = 0) trains on the task losses alone.
"""

import struct
import zlib
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import (ChecksumError, HintConsistencyError, MissingHintError,
                     ParameterError, ShapeError, VersionError)
from .ptb import PoolingTransformerBlock

HINT_MAGIC = b"PTDH"
HINT_VERSION = 1
_HEADER = struct.Struct("<4sHHIII")  # magic, version, reserved, c, h, w

ADAPTATION_MODES = ("ptb", "conv")
# Ratio-1 MLP keeps the adaptation layer's footprint near the published
# complexity delta between conv-only and PTB-based adaptation.
ADAPTATION_MLP_RATIO = 1


def lambda_decay(e: int, total_epochs: int, delta: float) -> float:
    """Loss-balancing decay: 1 - e/(delta*E) while e <= delta*E, then 0."""
    if not 0.0 < delta <= 1.0:
        raise ParameterError(f"delta must lie in (0, 1], got {delta}")
    if total_epochs < 1:
        raise ParameterError(f"total_epochs must be >= 1, got {total_epochs}")
    if not 0 <= e <= total_epochs:
        raise ParameterError(f"epoch index {e} outside [0, {total_epochs}]")
    stage1_end = delta * total_epochs
    if e > stage1_end:
        return 0.0
    return max(0.0, 1.0 - e / stage1_end)


class AdaptationLayer(nn.Module):
    """Maps the student bottleneck onto the teacher's hint shape.

    A pooling transformer block followed by a 1x1 conv; mode "conv" drops
    the block (the cheaper ablation variant).
    """

    def __init__(self, student_channels: int, teacher_channels: int, mode: str = "ptb",
                 mlp_ratio: int = ADAPTATION_MLP_RATIO):
        super().__init__()
        if mode not in ADAPTATION_MODES:
            raise ParameterError(f"adaptation mode must be one of {ADAPTATION_MODES}")
        self.student_channels = student_channels
        self.teacher_channels = teacher_channels
        self.mode = mode
        self.block = (PoolingTransformerBlock(student_channels, mlp_ratio)
                      if mode == "ptb" else None)
        self.proj = nn.Conv2d(student_channels, teacher_channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.student_channels:
            raise ShapeError(
                f"expected Nx{self.student_channels}xHxW bottleneck, got {tuple(x.shape)}"
            )
        if self.block is not None:
            x = self.block(x)
        return self.proj(x)


def build_adaptation(student_channels: int = 256, teacher_channels: int = 512,
                     mode: str = "ptb", mlp_ratio: int = ADAPTATION_MLP_RATIO,
                     seed: int = 0) -> AdaptationLayer:
    torch.manual_seed(seed)
    return AdaptationLayer(student_channels, teacher_channels, mode, mlp_ratio)


def adapt(student_bottleneck: torch.Tensor, layer: AdaptationLayer) -> torch.Tensor:
    return layer(student_bottleneck)


# ---------------------------------------------------------------------------
# Hint files: little-endian float32 container with a trailing crc32.

def write_hint_file(path, feature: np.ndarray) -> None:
    feature = np.ascontiguousarray(feature, dtype=np.float32)
    if feature.ndim != 3:
        raise ShapeError(f"hint feature must be CxHxW, got shape {feature.shape}")
    c, h, w = feature.shape
    header = _HEADER.pack(HINT_MAGIC, HINT_VERSION, 0, c, h, w)
    payload = feature.tobytes()
    crc = zlib.crc32(header + payload) & 0xFFFFFFFF
    Path(path).write_bytes(header + payload + struct.pack("<I", crc))


def read_hint_file(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size + 4:
        raise ChecksumError(f"hint file {path} is truncated")
    header = blob[:_HEADER.size]
    magic, version, _, c, h, w = _HEADER.unpack(header)
    if magic != HINT_MAGIC:
        raise ChecksumError(f"{path} is not a hint file (bad magic)")
    if version != HINT_VERSION:
        raise VersionError(f"hint file {path} has version {version}, expected {HINT_VERSION}")
    payload = blob[_HEADER.size:-4]
    stored_crc, = struct.unpack("<I", blob[-4:])
    if zlib.crc32(header + payload) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError(f"hint file {path} failed its checksum")
    expected = c * h * w * 4
    if len(payload) != expected:
        raise ChecksumError(f"hint file {path} payload length mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(c, h, w).copy()


class FileHintProvider:
    """Precomputed hints: one `<sample-id>.hint` file per sample in a directory."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self._shape = None

    def get(self, sample_id: str) -> torch.Tensor:
        path = self.directory / f"{sample_id}.hint"
        if not path.exists():
            raise MissingHintError(f"no hint file for sample id '{sample_id}' in {self.directory}")
        feature = read_hint_file(path)
        if self._shape is None:
            self._shape = feature.shape
        elif feature.shape != self._shape:
            raise HintConsistencyError(
                f"hint shape drift: {feature.shape} for '{sample_id}' vs {self._shape} earlier"
            )
        return torch.from_numpy(feature)

    def hints(self, sample_ids, model_input=None) -> torch.Tensor:
        return torch.stack([self.get(sid) for sid in sample_ids])

    @property
    def channels(self) -> int | None:
        return None if self._shape is None else self._shape[0]


class TeacherHintProvider:
    """Online hints from a frozen teacher network's bottleneck.

    `sample_inputs` optionally maps sample ids to full-size model inputs so
    hints can also be served by id alone.
    """

    def __init__(self, teacher, sample_inputs: dict | None = None):
        self.teacher = teacher
        self.teacher.eval()
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.sample_inputs = sample_inputs or {}

    def hints(self, sample_ids, model_input: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.teacher.bottleneck(model_input).detach()

    def get(self, sample_id: str) -> torch.Tensor:
        if sample_id not in self.sample_inputs:
            raise MissingHintError(f"teacher provider has no registered input for '{sample_id}'")
        x = self.sample_inputs[sample_id]
        if x.dim() == 3:
            x = x.unsqueeze(0)
        with torch.no_grad():
            return self.teacher.bottleneck(x).squeeze(0).detach()

    @property
    def channels(self) -> int:
        return self.teacher.cfg.channel_schedule[-1]


def get_hint(provider, sample_id: str) -> torch.Tensor:
    """Fetch one sample's hint feature by id; identical across repeated calls."""
    return provider.get(sample_id)
