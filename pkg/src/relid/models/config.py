"""Model configuration and its key=value text form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

ARCHITECTURES = ("entropy_dnn", "i_blstm", "x_blstm", "hgru", "xvector", "x_blstm_e2e")

DEFAULT_TDNN_OFFSETS = ((-2, -1, 0, 1, 2), (-2, 0, 2), (-3, 0, 3), (0,), (0,))


@dataclass
class ModelConfig:
    architecture: str
    num_languages: int
    input_dim: int
    hidden: int = 64                      # recurrent cells per direction
    layers: int = 2
    fc: int = 128
    dnn_hidden: tuple = (128, 128, 128)
    hgru_sizes: tuple = (64, 128, 128)
    hgru_window: int = 20                 # layer-1 window and shift, in frames
    hgru_shift: int = 10
    hgru_group: int = 10                  # layer-1 outputs per layer-2 emission
    tdnn_dims: tuple = (64, 64, 64, 64, 128)
    tdnn_offsets: tuple = DEFAULT_TDNN_OFFSETS
    embed_dim: int = 64
    short_threshold_s: float = 5.0
    short_crop_s: float = 3.0
    long_crop_s: tuple = (10.0, 30.0)
    crop_s: float = 15.0
    xvector_crop_frames: tuple = (200, 400)
    win_frames: int = 100
    hop_frames: int = 20
    lr: float = 1e-3
    e2e_lr_scale: float = 0.1
    batch_size: int = 16
    max_epochs: int = 30
    patience: int = 5
    val_fraction: float = 0.1
    clip_norm: float = 5.0
    zero_output: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        sizes = [self.num_languages, self.input_dim, self.hidden, self.layers, self.fc, self.embed_dim,
                 *self.dnn_hidden, *self.hgru_sizes, *self.tdnn_dims]
        if any(int(s) <= 0 for s in sizes):
            raise ValueError("all layer sizes must be positive")
        if self.num_languages < 2:
            raise ValueError("need at least two languages")
        if self.short_threshold_s <= 0:
            raise ValueError("duration-head threshold must be positive")
        if len(self.tdnn_offsets) != len(self.tdnn_dims):
            raise ValueError("one offset set per TDNN layer")

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def preset(cls, name: str, architecture: str, num_languages: int, input_dim: int, **kw) -> "ModelConfig":
        if name == "paper":
            sizes = dict(hidden=256, fc=512, dnn_hidden=(1024, 1024, 1024), hgru_sizes=(256, 512, 512),
                         tdnn_dims=(512, 512, 512, 512, 1500), embed_dim=512)
        elif name == "desk":
            sizes = {}
        else:
            raise ValueError(f"unknown preset {name!r}")
        sizes.update(kw)
        return cls(architecture, num_languages, input_dim, **sizes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "tdnn_offsets":
                v = ";".join(",".join(str(o) for o in group) for group in v)
            elif isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in fields:
                raise ValueError(f"line {lineno}: unknown or malformed key {key!r}")
            raw[key] = value.strip()
        defaults = cls("entropy_dnn", 2, 1)
        kw = {}
        for key, value in raw.items():
            ref = getattr(defaults, key)
            if key == "tdnn_offsets":
                kw[key] = tuple(tuple(int(o) for o in g.split(",")) for g in value.split(";"))
            elif isinstance(ref, bool):
                kw[key] = value.lower() in ("1", "true", "yes")
            elif isinstance(ref, tuple):
                cast = float if any(isinstance(x, float) for x in ref) else int
                kw[key] = tuple(cast(x) for x in value.split(","))
            elif isinstance(ref, int):
                kw[key] = int(value)
            elif isinstance(ref, float):
                kw[key] = float(value)
            else:
                kw[key] = value
        return cls(**kw)
