"""Little-endian binary containers for datasets, classifiers and flows.

Dataset (``CADS``)::

    magic "CADS" | version u32 | N u64 | H u32 | W u32 | C u32 | num_classes u32
    | N*H*W*C f64 images | N u32 labels

Classifier (``CADM``)::

    magic "CADM" | version u32 | arch (u32 length + utf8) | num_classes u32
    | H u32 | W u32 | C u32 | tensors

Flow (``CADF-FLOW``)::

    magic "CADF-FLOW" | version u32 | header (u32 length + utf8 JSON) | tensors

``tensors`` repeats ``name_len u32 | name utf8 | rank u32 | extents u64[rank]
| f64 data`` until the end of the file.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .classifier import ClassifierModel
from .data import Dataset
from .flow import CondFlow, FlowConfig
from .latent import decoder_from_dict

VERSION = 1
DATASET_MAGIC = b"CADS"
MODEL_MAGIC = b"CADM"
FLOW_MAGIC = b"CADF-FLOW"


class FormatError(ValueError):
    pass


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def f64(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def done(self) -> bool:
        return self.pos == len(self.buf)


def _text(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _header(r: _Reader, magic: bytes) -> None:
    got = r.take(len(magic))
    if got != magic:
        raise FormatError(f"{r.what}: bad magic {got!r}, expected {magic!r}")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{r.what}: unsupported version {version}")


def _pack_tensors(params: dict[str, np.ndarray]) -> bytes:
    parts = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        parts.append(_text(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def _unpack_tensors(r: _Reader) -> dict[str, np.ndarray]:
    params = {}
    while not r.done():
        name = r.text()
        rank = r.u32()
        shape = tuple(r.u64() for _ in range(rank))
        params[name] = r.f64(int(np.prod(shape, dtype=np.int64))).reshape(shape)
    return params


# ---------------------------------------------------------------- datasets


def dataset_bytes(ds: Dataset) -> bytes:
    n, h, w, c = ds.images.shape
    head = DATASET_MAGIC + struct.pack("<IQIIII", VERSION, n, h, w, c, ds.num_classes)
    return (head + np.ascontiguousarray(ds.images, dtype="<f8").tobytes()
            + np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def load_dataset(path, split: str = "train") -> Dataset:
    r = _Reader(Path(path).read_bytes(), f"dataset {path}")
    _header(r, DATASET_MAGIC)
    n = r.u64()
    h, w, c, k = r.u32(), r.u32(), r.u32(), r.u32()
    images = r.f64(n * h * w * c).reshape(n, h, w, c)
    labels = np.frombuffer(r.take(4 * n), dtype="<u4").astype(np.int64)
    if not r.done():
        raise FormatError(f"dataset {path}: {len(r.buf) - r.pos} trailing bytes")
    return Dataset(images, labels, k, split=split)


# ---------------------------------------------------------------- classifiers


def save_classifier(model: ClassifierModel, path) -> None:
    h, w, c = model.input_shape
    head = (MODEL_MAGIC + struct.pack("<I", VERSION) + _text(model.arch)
            + struct.pack("<IIII", model.num_classes, h, w, c))
    Path(path).write_bytes(head + _pack_tensors(model.params))


def load_classifier(path) -> ClassifierModel:
    r = _Reader(Path(path).read_bytes(), f"classifier {path}")
    _header(r, MODEL_MAGIC)
    arch = r.text()
    k, h, w, c = r.u32(), r.u32(), r.u32(), r.u32()
    return ClassifierModel(arch, _unpack_tensors(r), k, (h, w, c))


# ---------------------------------------------------------------- flows


def save_flow(flow: CondFlow, decoder, path) -> None:
    header = {
        "flow": flow.config.to_dict(),
        "decoder": decoder.to_dict(),
        "latent_shape": list(flow.config.latent_shape),
        "r": getattr(decoder, "r", None),
    }
    head = FLOW_MAGIC + struct.pack("<I", VERSION) + _text(json.dumps(header, sort_keys=True))
    Path(path).write_bytes(head + _pack_tensors(flow.params))


def load_flow(path):
    """Returns ``(flow, decoder)``."""
    r = _Reader(Path(path).read_bytes(), f"flow {path}")
    _header(r, FLOW_MAGIC)
    header = json.loads(r.text())
    config = FlowConfig.from_dict(header["flow"])
    params = _unpack_tensors(r)
    expected = set(CondFlow.create(config).params)
    if set(params) != expected:
        raise FormatError(f"flow {path}: parameter names do not match the stored config")
    return CondFlow(config, params), decoder_from_dict(header["decoder"])
