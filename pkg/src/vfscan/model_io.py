"""On-disk formats: .vglm models, .vglb batches, JSON/CSV reports.

Both binary formats are little-endian and float32-exact, so a save/load
round trip is bitwise lossless.

ModelFile (.vglm):
    magic "VGLM", version u32, n_layers u32, n_classes u32, input CHW u32x3
    per layer:
        kind u8 (index into engine.KINDS), n_inputs u8, inputs i32 x n,
        kernel u32, stride u32, padding u32, groups u32, eps f32,
        n_params u8, then per parameter:
            tag u8, ndim u8, dims u32 x ndim, float32 data

BatchFile (.vglb):
    magic "VGLB", version u32, count u32, CHW u32x3,
    float32 pixels (count*C*H*W), u16 labels (count)

Reports are JSON (full structure) or CSV (the per-layer rows only); both
are written atomically (temp file + rename).
"""

import csv
import io
import json
import os
import struct
import tempfile

import numpy as np

from .engine import KINDS, LayerSpec, Network
from .errors import ConfigError, LoadError

MODEL_MAGIC = b"VGLM"
BATCH_MAGIC = b"VGLB"
FORMAT_VERSION = 1

_PARAM_TAGS = ("weight", "bias", "gamma", "beta", "running_mean", "running_var")


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.data):
            raise LoadError(f"{self.path}: truncated while reading {what}")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))

    def array(self, count: int, dtype, what: str) -> np.ndarray:
        raw = self.take(count * np.dtype(dtype).itemsize, what)
        return np.frombuffer(raw, dtype=dtype).copy()

    def done(self, what: str):
        if self.off != len(self.data):
            raise LoadError(
                f"{self.path}: {len(self.data) - self.off} trailing bytes after {what}")


def _layer_params(l: LayerSpec) -> list[tuple[int, np.ndarray]]:
    out = []
    for tag, name in enumerate(_PARAM_TAGS):
        arr = getattr(l, name)
        if arr is not None:
            out.append((tag, np.ascontiguousarray(arr, dtype=np.float32)))
    return out


def save_model(net: Network, path: str):
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<III", FORMAT_VERSION, len(net.layers), net.n_classes))
    buf.write(struct.pack("<III", *net.input_shape))
    for l in net.layers:
        buf.write(struct.pack("<BB", KINDS.index(l.kind), len(l.inputs)))
        buf.write(struct.pack(f"<{len(l.inputs)}i", *l.inputs))
        buf.write(struct.pack("<IIIIf", l.kernel, l.stride, l.padding, l.groups, l.eps))
        params = _layer_params(l)
        buf.write(struct.pack("<B", len(params)))
        for tag, arr in params:
            buf.write(struct.pack("<BB", tag, arr.ndim))
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(arr.astype("<f4").tobytes())
    _atomic_write(path, buf.getvalue())


def load_model(path: str) -> Network:
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    if r.take(4, "magic") != MODEL_MAGIC:
        raise LoadError(f"{path}: bad magic, expected {MODEL_MAGIC!r}")
    version, n_layers, n_classes = r.unpack("<III", "header")
    if version != FORMAT_VERSION:
        raise LoadError(f"{path}: unsupported version {version}")
    input_shape = r.unpack("<III", "input shape")
    layers = []
    for i in range(n_layers):
        kind_idx, n_inputs = r.unpack("<BB", f"layer {i} kind")
        if kind_idx >= len(KINDS):
            raise LoadError(f"{path}: layer {i} has unknown kind tag {kind_idx}")
        inputs = r.unpack(f"<{n_inputs}i", f"layer {i} inputs")
        kernel, stride, padding, groups, eps = r.unpack("<IIIIf", f"layer {i} hyperparams")
        spec = LayerSpec(kind=KINDS[kind_idx], inputs=tuple(inputs), kernel=kernel,
                         stride=stride, padding=padding, groups=groups, eps=eps)
        (n_params,) = r.unpack("<B", f"layer {i} param count")
        for _ in range(n_params):
            tag, ndim = r.unpack("<BB", f"layer {i} param header")
            if tag >= len(_PARAM_TAGS):
                raise LoadError(f"{path}: layer {i} has unknown param tag {tag}")
            dims = r.unpack(f"<{ndim}I", f"layer {i} {_PARAM_TAGS[tag]} dims")
            count = int(np.prod(dims)) if dims else 1
            arr = r.array(count, "<f4", f"layer {i} {_PARAM_TAGS[tag]} data")
            setattr(spec, _PARAM_TAGS[tag], arr.reshape(dims))
        layers.append(spec)
    r.done("model")
    try:
        return Network(layers, n_classes, tuple(input_shape))
    except ConfigError as exc:
        raise LoadError(f"{path}: {exc}") from exc


def save_batch(images: np.ndarray, labels: np.ndarray, path: str):
    images = np.ascontiguousarray(images, dtype="<f4")
    labels = np.ascontiguousarray(labels, dtype="<u2")
    if images.ndim != 4:
        raise ConfigError(f"batch images must be NCHW, got shape {images.shape}")
    if labels.shape != (images.shape[0],):
        raise ConfigError(
            f"labels shape {labels.shape} does not match {images.shape[0]} images")
    buf = io.BytesIO()
    buf.write(BATCH_MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, images.shape[0]))
    buf.write(struct.pack("<III", *images.shape[1:]))
    buf.write(images.tobytes())
    buf.write(labels.tobytes())
    _atomic_write(path, buf.getvalue())


def load_batch(path: str, n_classes: int | None = None):
    """Returns (images NCHW float32, labels u16)."""
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    if r.take(4, "magic") != BATCH_MAGIC:
        raise LoadError(f"{path}: bad magic, expected {BATCH_MAGIC!r}")
    version, count = r.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise LoadError(f"{path}: unsupported version {version}")
    c, h, w = r.unpack("<III", "image shape")
    images = r.array(count * c * h * w, "<f4", "pixel data").reshape(count, c, h, w)
    labels = r.array(count, "<u2", "labels")
    r.done("batch")
    if n_classes is not None and count and int(labels.max()) >= n_classes:
        raise LoadError(
            f"{path}: label {int(labels.max())} >= class count {n_classes}")
    return images, labels


# ---------------------------------------------------------------------------
# reports

def _plain(obj):
    """Recursively convert numpy scalars/arrays so JSON stays canonical."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    return obj


def write_report(report: dict, path: str, fmt: str = "json"):
    """Serialize a report dict; CSV keeps only the per-layer rows."""
    report = _plain(report)
    if fmt == "json":
        payload = (json.dumps(report, indent=2, sort_keys=True) + "\n").encode()
    elif fmt == "csv":
        rows = report.get("layers", [])
        out = io.StringIO()
        if rows:
            writer = csv.DictWriter(out, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        else:
            out.write("layer\n")
        payload = out.getvalue().encode()
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    _atomic_write(path, payload)


def read_report(path: str) -> dict:
    with open(path) as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as exc:
            raise LoadError(f"{path}: invalid report JSON: {exc}") from exc


def _atomic_write(path: str, payload: bytes):
    """Write to a temp file in the target directory, then rename."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
