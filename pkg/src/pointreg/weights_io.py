"""Binary container for model weights.

Layout: magic bytes ``FRWT``, format version as 32-bit unsigned
little-endian, tensor count as 64-bit unsigned little-endian, then one
record per tensor: name length, UTF-8 name, rank, and the dimensions, all as
64-bit unsigned little-endian, followed by the row-major 32-bit
little-endian float data.

Besides the trainable tensors the file stores the architecture scalars
(per-stage sample counts and radii, the neighborhood cap, and the attention
neighbor count) as rank-0 tensors, so a weights file alone is enough to
reconstruct a runnable model. The loader validates the full dimension chain
before accepting the file.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .attention import AttentionWeights
from .encoder import EncoderWeights, FPLayerParams, SALayerParams
from .model import ModelWeights, named_parameters

FRWT_MAGIC = b"FRWT"
FRWT_VERSION = 1

_U64 = struct.Struct("<Q")
_HEADER = struct.Struct("<4sIQ")


class WeightsFormatError(ValueError):
    """A weights file is malformed, inconsistent, or has an unknown format."""


def _structure_scalars(model: ModelWeights) -> dict[str, float]:
    scalars: dict[str, float] = {}
    for i, layer in enumerate(model.encoder.sa_layers, start=1):
        scalars[f"sa{i}.num_samples"] = float(layer.num_samples)
        scalars[f"sa{i}.radius"] = float(layer.radius)
    scalars["encoder.max_neighbors"] = float(model.encoder.sa_layers[0].max_neighbors)
    scalars["att.k"] = float(model.attention_k)
    return scalars


def save_model(model: ModelWeights, path) -> None:
    model.validate()
    tensors: dict[str, np.ndarray] = {
        name: np.asarray(value, dtype=np.float64)
        for name, value in _structure_scalars(model).items()
    }
    tensors.update(named_parameters(model))
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FRWT_MAGIC, FRWT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            encoded = name.encode("utf-8")
            fh.write(_U64.pack(len(encoded)))
            fh.write(encoded)
            fh.write(_U64.pack(arr.ndim))
            for dim in arr.shape:
                fh.write(_U64.pack(dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, count: int, path: Path) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise WeightsFormatError(f"{path}: truncated file")
    return data


def _read_tensors(path: Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        header = _read_exact(fh, _HEADER.size, path)
        magic, version, count = _HEADER.unpack(header)
        if magic != FRWT_MAGIC:
            raise WeightsFormatError(f"{path}: bad magic {magic!r}")
        if version != FRWT_VERSION:
            raise WeightsFormatError(f"{path}: unsupported version {version}")
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = _U64.unpack(_read_exact(fh, 8, path))
            name = _read_exact(fh, name_len, path).decode("utf-8")
            (rank,) = _U64.unpack(_read_exact(fh, 8, path))
            shape = tuple(
                _U64.unpack(_read_exact(fh, 8, path))[0] for _ in range(rank)
            )
            size = int(np.prod(shape, dtype=np.int64)) if rank else 1
            data = _read_exact(fh, 4 * size, path)
            arr = np.frombuffer(data, dtype="<f4").astype(np.float64)
            tensors[name] = arr.reshape(shape) if rank else arr[0]
        if fh.read(1):
            raise WeightsFormatError(f"{path}: trailing bytes after tensor table")
    return tensors


def _pop(tensors: dict, name: str, path: Path):
    try:
        return tensors.pop(name)
    except KeyError:
        raise WeightsFormatError(f"{path}: missing tensor {name!r}") from None


def _pop_mlp(tensors: dict, prefix: str, path: Path):
    weights, biases = [], []
    j = 0
    while f"{prefix}.mlp.{j}.weight" in tensors:
        weights.append(_pop(tensors, f"{prefix}.mlp.{j}.weight", path))
        biases.append(_pop(tensors, f"{prefix}.mlp.{j}.bias", path))
        j += 1
    if not weights:
        raise WeightsFormatError(f"{path}: no MLP tensors for {prefix!r}")
    return weights, biases


def load_model(path) -> ModelWeights:
    path = Path(path)
    tensors = _read_tensors(path)
    max_neighbors = int(_pop(tensors, "encoder.max_neighbors", path))
    sa_layers = []
    for i in range(1, 5):
        weights, biases = _pop_mlp(tensors, f"sa{i}", path)
        sa_layers.append(
            SALayerParams(
                num_samples=int(_pop(tensors, f"sa{i}.num_samples", path)),
                radius=float(_pop(tensors, f"sa{i}.radius", path)),
                weights=weights,
                biases=biases,
                max_neighbors=max_neighbors,
            )
        )
    fp_weights, fp_biases = _pop_mlp(tensors, "fp", path)
    attention = AttentionWeights(
        self_wf=_pop(tensors, "att.self.wf", path),
        self_ws=_pop(tensors, "att.self.ws", path),
        cross_wf=_pop(tensors, "att.cross.wf", path),
        cross_ws=_pop(tensors, "att.cross.ws", path),
    )
    model = ModelWeights(
        encoder=EncoderWeights(sa_layers, FPLayerParams(fp_weights, fp_biases)),
        attention=attention,
        attention_k=int(_pop(tensors, "att.k", path)),
    )
    if tensors:
        raise WeightsFormatError(f"{path}: unexpected tensors {sorted(tensors)}")
    try:
        model.validate()
    except ValueError as exc:
        raise WeightsFormatError(f"{path}: inconsistent dimension chain ({exc})") from exc
    return model
