"""Bit-exact binary container for checkpoints, calibration batches, and artifacts.

Layout, all integers little-endian:

    offset 0   magic "RPIQ" (4 bytes)
    offset 4   format_version, u32
    offset 8   header_length, u64 (bytes of UTF-8 header)
    offset 16  header, UTF-8 key=value lines with dotted per-layer records
    after      raw blob; per-record offsets are relative to the blob start

Matrix payloads are IEEE-754 f32 row-major for checkpoints and calibration
batches; quantized artifacts pack codes as little-endian bitstreams next to
f32 scales and u8 zero points. Field order is fixed and nothing time- or
host-dependent is written, so identical inputs produce byte-identical files.
The header records a CRC-32 of the blob; a mismatch fails the load.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, CorruptFileError, FormatVersionError, ShapeError
from .grid import PackedBlock, QuantGrid, dequantize_columns, pack_codes, unpack_codes

MAGIC = b"RPIQ"
FORMAT_VERSION = 1
_PREAMBLE_LEN = 16

KIND_MODEL = "model"
KIND_CALIBRATION = "calibration"
KIND_QUANTIZED = "quantized"


@dataclass(frozen=True)
class LayerRecord:
    name: str
    rows: int
    cols: int
    dtype: str
    blob_offset: int
    blob_length: int


@dataclass(frozen=True)
class ModelManifest:
    format_version: int
    kind: str
    layers: tuple[LayerRecord, ...]


@dataclass(frozen=True)
class TraceSummary:
    gamma_init: float
    gamma_final: float
    iterations: int
    stopped_early: bool


@dataclass(frozen=True)
class QuantizedLayer:
    name: str
    codes: np.ndarray   # (rows, cols) int64
    grid: QuantGrid
    summary: TraceSummary
    snapshot: tuple[np.ndarray, np.ndarray] | None = None  # (x_orig, y_orig) float64

    @property
    def rows(self) -> int:
        return self.codes.shape[0]

    @property
    def cols(self) -> int:
        return self.codes.shape[1]


@dataclass(frozen=True)
class QuantizedArtifact:
    bits: int
    group_size: int
    layers: tuple[QuantizedLayer, ...]
    format_version: int = FORMAT_VERSION


def dequantize_layer(layer: QuantizedLayer) -> np.ndarray:
    """Reconstruct the layer's deployable f32 weights from codes and grids."""
    return dequantize_columns(layer.codes, layer.grid).astype(np.float32)


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------

def _check_name(name: str) -> str:
    if not name or "\n" in name:
        raise ArgumentError(f"invalid record name {name!r}")
    return name


def _write_file(path, kind: str, top_lines: list[str], record_lines: list[str],
                blob: bytes) -> None:
    lines = [f"kind={kind}", f"blob_crc32={zlib.crc32(blob) & 0xFFFFFFFF}"]
    lines.extend(top_lines)
    lines.extend(record_lines)
    header = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(FORMAT_VERSION.to_bytes(4, "little"))
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        fh.write(blob)


def save_checkpoint(path, layers, kind: str = KIND_MODEL) -> None:
    """Write named f32 matrices. layers is an iterable of (name, matrix)."""
    if kind not in (KIND_MODEL, KIND_CALIBRATION):
        raise ArgumentError(f"unsupported checkpoint kind {kind!r}")
    parts: list[bytes] = []
    records: list[str] = []
    seen: set[str] = set()
    offset = 0
    count = 0
    for i, (name, matrix) in enumerate(layers):
        _check_name(name)
        if name in seen:
            raise ArgumentError(f"duplicate record name {name!r}")
        seen.add(name)
        arr = np.ascontiguousarray(np.asarray(matrix), dtype="<f4")
        if arr.ndim != 2:
            raise ShapeError(f"record {name!r} must be 2-D, got ndim={arr.ndim}")
        data = arr.tobytes()
        records.extend([
            f"layer.{i}.name={name}",
            f"layer.{i}.rows={arr.shape[0]}",
            f"layer.{i}.cols={arr.shape[1]}",
            f"layer.{i}.dtype=f32",
            f"layer.{i}.blob_offset={offset}",
            f"layer.{i}.blob_length={len(data)}",
        ])
        parts.append(data)
        offset += len(data)
        count += 1
    _write_file(path, kind, [f"layer_count={count}"], records, b"".join(parts))


def _fmt_float(x: float) -> str:
    return repr(float(x))


def save_quantized(artifact: QuantizedArtifact, path) -> None:
    """Write a quantized artifact: packed codes, f32 scales, u8 zero points."""
    parts: list[bytes] = []
    records: list[str] = []
    seen: set[str] = set()
    offset = 0

    def put(data: bytes) -> tuple[int, int]:
        nonlocal offset
        parts.append(data)
        start = offset
        offset += len(data)
        return start, len(data)

    for i, layer in enumerate(artifact.layers):
        _check_name(layer.name)
        if layer.name in seen:
            raise ArgumentError(f"duplicate layer name {layer.name!r}")
        seen.add(layer.name)
        grid = layer.grid
        if grid.bits != artifact.bits or grid.group_size != artifact.group_size:
            raise ArgumentError(
                f"layer {layer.name!r} grid ({grid.bits} bits, group {grid.group_size}) "
                f"disagrees with artifact ({artifact.bits}, {artifact.group_size})"
            )
        if layer.codes.shape != (grid.rows, grid.cols):
            raise ShapeError(f"layer {layer.name!r} codes shape {layer.codes.shape} "
                             f"!= grid ({grid.rows}, {grid.cols})")
        packed = pack_codes(layer.codes.ravel(), grid.bits)
        codes_off, codes_len = put(packed.data)
        scales = np.ascontiguousarray(grid.scale, dtype="<f4")
        scales_off, scales_len = put(scales.tobytes())
        zeros = np.ascontiguousarray(grid.zero_point, dtype=np.uint8)
        zeros_off, zeros_len = put(zeros.tobytes())
        records.extend([
            f"layer.{i}.name={layer.name}",
            f"layer.{i}.rows={layer.rows}",
            f"layer.{i}.cols={layer.cols}",
            f"layer.{i}.bits={grid.bits}",
            f"layer.{i}.group_size={grid.group_size}",
            f"layer.{i}.n_groups={grid.n_groups}",
            f"layer.{i}.codes_offset={codes_off}",
            f"layer.{i}.codes_length={codes_len}",
            f"layer.{i}.scales_offset={scales_off}",
            f"layer.{i}.scales_length={scales_len}",
            f"layer.{i}.zeros_offset={zeros_off}",
            f"layer.{i}.zeros_length={zeros_len}",
            f"layer.{i}.gamma_init={_fmt_float(layer.summary.gamma_init)}",
            f"layer.{i}.gamma_final={_fmt_float(layer.summary.gamma_final)}",
            f"layer.{i}.iterations={layer.summary.iterations}",
            f"layer.{i}.stopped_early={int(layer.summary.stopped_early)}",
        ])
        if layer.snapshot is not None:
            x_orig, y_orig = layer.snapshot
            x = np.ascontiguousarray(x_orig, dtype="<f8")
            y = np.ascontiguousarray(y_orig, dtype="<f8")
            x_off, x_len = put(x.tobytes())
            y_off, y_len = put(y.tobytes())
            records.extend([
                f"layer.{i}.snapshot_rows={x.shape[0]}",
                f"layer.{i}.snapshot_x_offset={x_off}",
                f"layer.{i}.snapshot_x_length={x_len}",
                f"layer.{i}.snapshot_y_offset={y_off}",
                f"layer.{i}.snapshot_y_length={y_len}",
            ])
    top = [
        f"bits={artifact.bits}",
        f"group_size={artifact.group_size}",
        f"layer_count={len(artifact.layers)}",
    ]
    _write_file(path, KIND_QUANTIZED, top, records, b"".join(parts))


# ---------------------------------------------------------------------------
# Reading
# ---------------------------------------------------------------------------

def _read_file(path) -> tuple[dict[str, str], bytes]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PREAMBLE_LEN or raw[:4] != MAGIC:
        raise CorruptFileError(f"{path}: not a container file (bad magic)")
    version = int.from_bytes(raw[4:8], "little")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"{path}: unsupported format version {version}")
    header_len = int.from_bytes(raw[8:16], "little")
    if _PREAMBLE_LEN + header_len > len(raw):
        raise CorruptFileError(f"{path}: header extends past end of file")
    try:
        header = raw[_PREAMBLE_LEN:_PREAMBLE_LEN + header_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptFileError(f"{path}: header is not valid UTF-8") from exc
    fields: dict[str, str] = {}
    for line in header.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise CorruptFileError(f"{path}: malformed header line {line!r}")
        key, value = line.split("=", 1)
        fields[key] = value
    blob = raw[_PREAMBLE_LEN + header_len:]
    declared = fields.get("blob_crc32")
    if declared is None:
        raise CorruptFileError(f"{path}: header is missing blob_crc32")
    if int(declared) != (zlib.crc32(blob) & 0xFFFFFFFF):
        raise CorruptFileError(f"{path}: blob checksum mismatch")
    return fields, blob


class _Header:
    def __init__(self, fields: dict[str, str], path):
        self.fields = fields
        self.path = path

    def get(self, key: str) -> str:
        try:
            return self.fields[key]
        except KeyError:
            raise CorruptFileError(f"{self.path}: header is missing {key!r}") from None

    def get_int(self, key: str) -> int:
        value = self.get(key)
        try:
            return int(value)
        except ValueError:
            raise CorruptFileError(f"{self.path}: {key!r} is not an integer: {value!r}") from None

    def get_float(self, key: str) -> float:
        value = self.get(key)
        try:
            return float(value)
        except ValueError:
            raise CorruptFileError(f"{self.path}: {key!r} is not a float: {value!r}") from None

    def has(self, key: str) -> bool:
        return key in self.fields


def _extract(blob: bytes, offset: int, length: int, path, name: str) -> bytes:
    if offset < 0 or length < 0 or offset + length > len(blob):
        raise CorruptFileError(f"{path}: blob truncated at record {name!r}")
    return blob[offset:offset + length]


def load_checkpoint(path) -> tuple[ModelManifest, dict[str, np.ndarray]]:
    """Read a checkpoint or calibration container.

    Returns the manifest and a dict of f32 matrices in declared order.
    """
    fields, blob = _read_file(path)
    hdr = _Header(fields, path)
    kind = hdr.get("kind")
    if kind not in (KIND_MODEL, KIND_CALIBRATION):
        raise CorruptFileError(f"{path}: expected a checkpoint container, found kind={kind!r}")
    count = hdr.get_int("layer_count")
    records = []
    matrices: dict[str, np.ndarray] = {}
    for i in range(count):
        name = hdr.get(f"layer.{i}.name")
        rows = hdr.get_int(f"layer.{i}.rows")
        cols = hdr.get_int(f"layer.{i}.cols")
        dtype = hdr.get(f"layer.{i}.dtype")
        if dtype != "f32":
            raise CorruptFileError(f"{path}: record {name!r} has unsupported dtype {dtype!r}")
        offset = hdr.get_int(f"layer.{i}.blob_offset")
        length = hdr.get_int(f"layer.{i}.blob_length")
        if length != rows * cols * 4:
            raise CorruptFileError(f"{path}: record {name!r} length {length} != {rows}x{cols} f32")
        data = _extract(blob, offset, length, path, name)
        matrices[name] = np.frombuffer(data, dtype="<f4").reshape(rows, cols).copy()
        records.append(LayerRecord(name=name, rows=rows, cols=cols, dtype=dtype,
                                   blob_offset=offset, blob_length=length))
    manifest = ModelManifest(format_version=FORMAT_VERSION, kind=kind, layers=tuple(records))
    return manifest, matrices


def load_quantized(path) -> QuantizedArtifact:
    """Read a quantized artifact, validating structure and checksum."""
    fields, blob = _read_file(path)
    hdr = _Header(fields, path)
    kind = hdr.get("kind")
    if kind != KIND_QUANTIZED:
        raise CorruptFileError(f"{path}: expected a quantized artifact, found kind={kind!r}")
    bits = hdr.get_int("bits")
    group_size = hdr.get_int("group_size")
    count = hdr.get_int("layer_count")
    layers = []
    for i in range(count):
        name = hdr.get(f"layer.{i}.name")
        rows = hdr.get_int(f"layer.{i}.rows")
        cols = hdr.get_int(f"layer.{i}.cols")
        layer_bits = hdr.get_int(f"layer.{i}.bits")
        layer_group = hdr.get_int(f"layer.{i}.group_size")
        n_groups = hdr.get_int(f"layer.{i}.n_groups")
        codes_data = _extract(blob, hdr.get_int(f"layer.{i}.codes_offset"),
                              hdr.get_int(f"layer.{i}.codes_length"), path, name)
        scales_data = _extract(blob, hdr.get_int(f"layer.{i}.scales_offset"),
                               hdr.get_int(f"layer.{i}.scales_length"), path, name)
        zeros_data = _extract(blob, hdr.get_int(f"layer.{i}.zeros_offset"),
                              hdr.get_int(f"layer.{i}.zeros_length"), path, name)
        if len(scales_data) != rows * n_groups * 4 or len(zeros_data) != rows * n_groups:
            raise CorruptFileError(f"{path}: grid payload size mismatch on record {name!r}")
        codes = unpack_codes(PackedBlock(bits=layer_bits, n_codes=rows * cols,
                                         data=codes_data)).reshape(rows, cols)
        scale = np.frombuffer(scales_data, dtype="<f4").astype(np.float64).reshape(rows, n_groups)
        zero = np.frombuffer(zeros_data, dtype=np.uint8).astype(np.int64).reshape(rows, n_groups)
        grid = QuantGrid(bits=layer_bits, group_size=layer_group, cols=cols,
                         scale=scale, zero_point=zero)
        snapshot = None
        if hdr.has(f"layer.{i}.snapshot_rows"):
            n = hdr.get_int(f"layer.{i}.snapshot_rows")
            x_data = _extract(blob, hdr.get_int(f"layer.{i}.snapshot_x_offset"),
                              hdr.get_int(f"layer.{i}.snapshot_x_length"), path, name)
            y_data = _extract(blob, hdr.get_int(f"layer.{i}.snapshot_y_offset"),
                              hdr.get_int(f"layer.{i}.snapshot_y_length"), path, name)
            x = np.frombuffer(x_data, dtype="<f8").reshape(n, cols).copy()
            y = np.frombuffer(y_data, dtype="<f8").reshape(n, rows).copy()
            snapshot = (x, y)
        summary = TraceSummary(
            gamma_init=hdr.get_float(f"layer.{i}.gamma_init"),
            gamma_final=hdr.get_float(f"layer.{i}.gamma_final"),
            iterations=hdr.get_int(f"layer.{i}.iterations"),
            stopped_early=bool(hdr.get_int(f"layer.{i}.stopped_early")),
        )
        layers.append(QuantizedLayer(name=name, codes=codes, grid=grid,
                                     summary=summary, snapshot=snapshot))
    return QuantizedArtifact(bits=bits, group_size=group_size, layers=tuple(layers))
