"""Binary checkpoint format.

Layout::

    GSLAB1\\n
    config <json>\\n
    <kind>:<name> <d0>,<d1>,...\\n      (one line per array)
    end\\n
    <raw little-endian float64 data, arrays in manifest order>

A scalar array is written with an empty shape field.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from gslab.errors import LoadError
from gslab.numerics.resnet import MicroResNet, ModelConfig

MAGIC = b"GSLAB1"


def dumps(model: MicroResNet, extra: dict | None = None) -> bytes:
    config = model.config.to_dict()
    if extra:
        config["extra"] = extra
    lines = [MAGIC.decode(), "config " + json.dumps(config, sort_keys=True)]
    state = model.state()
    for name, arr in state.items():
        lines.append(f"{name} {','.join(str(d) for d in arr.shape)}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("ascii")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in state.values())
    return header + body


def save(model: MicroResNet, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(model, extra))
    return path


def loads(blob: bytes) -> tuple[MicroResNet, dict]:
    """Rebuild a model from checkpoint bytes; returns ``(model, extra)``."""
    if not blob.startswith(MAGIC + b"\n"):
        raise LoadError("not a GSLAB1 checkpoint")
    pos = len(MAGIC) + 1
    entries = []
    config = None
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise LoadError("truncated manifest")
        line = blob[pos:nl].decode("ascii")
        pos = nl + 1
        if line == "end":
            break
        if line.startswith("config "):
            config = json.loads(line[len("config "):])
            continue
        name, _, dims = line.partition(" ")
        shape = tuple(int(d) for d in dims.split(",")) if dims else ()
        entries.append((name, shape))
    if config is None:
        raise LoadError("manifest has no config line")
    extra = config.pop("extra", {})
    model = MicroResNet.blank(ModelConfig.from_dict(config))
    for name, shape in entries:
        count = int(np.prod(shape)) if shape else 1
        end = pos + 8 * count
        if end > len(blob):
            raise LoadError(f"data for {name!r} is truncated")
        arr = np.frombuffer(blob[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
        pos = end
        kind, _, key = name.partition(":")
        (model.params if kind == "param" else model.buffers)[key] = arr
    if pos != len(blob):
        raise LoadError("trailing bytes after checkpoint data")
    return model, extra


def load(path) -> tuple[MicroResNet, dict]:
    return loads(Path(path).read_bytes())


def load_backbone_into(target: MicroResNet, source: MicroResNet, include_heads: tuple = ()) -> None:
    """Copy backbone arrays (and optionally named heads) from ``source``.

    Raises LoadError when the architectures do not match.
    """
    names = source.backbone_names()
    for head in include_heads:
        names += source.head_names(head)
    for name in names:
        if name not in target.params or target.params[name].shape != source.params[name].shape:
            raise LoadError(f"checkpoint parameter {name!r} does not fit the target model")
        target.params[name] = source.params[name].copy()
    for name, arr in source.buffers.items():
        if name in target.buffers:
            if target.buffers[name].shape != arr.shape:
                raise LoadError(f"checkpoint buffer {name!r} does not fit the target model")
            target.buffers[name] = arr.copy()
