"""Model file container: magic "SFCM", u16 format version, JSON layer table,
raw little-endian float32 parameter payload, trailing CRC32 of the payload.
Round-trips are bit-exact."""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from . import ops
from .net import BatchNormLayer, ConvLayer, EmbeddingNet, PoolLayer, ReluLayer, build_net
from .ops import ConvSpec, ShapeError

MODEL_MAGIC = b"SFCM"
OPT_MAGIC = b"SFCO"
FORMAT_VERSION = 1


class ModelIOError(Exception):
    """Base for model container failures."""


class ModelFormatError(ModelIOError):
    """Not a recognizable model file (bad magic or malformed header)."""


class ModelVersionError(ModelIOError):
    """Container format version not supported."""


class ModelTruncatedError(ModelIOError):
    """File shorter than its header promises."""


class ModelChecksumError(ModelIOError):
    """Payload CRC32 does not match."""


def write_blob(path, magic: bytes, header: dict, tensors: list) -> None:
    """Write a (header, named-float32-tensors) container. ``tensors`` is an
    ordered list of (name, array); order defines payload layout."""
    header = dict(header)
    header["tensors"] = [[name, list(arr.shape)] for name, arr in tensors]
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(arr, dtype="<f4").tobytes() for _, arr in tensors
    )
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<H", FORMAT_VERSION))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
        f.write(struct.pack("<I", crc))


def read_blob(path, magic: bytes):
    """Read a container written by write_blob; returns (header, name->array)."""
    data = Path(path).read_bytes()
    if len(data) < 10:
        raise ModelTruncatedError(f"{path}: file too short ({len(data)} bytes)")
    if data[:4] != magic:
        raise ModelFormatError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise ModelVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (header_len,) = struct.unpack_from("<I", data, 6)
    header_end = 10 + header_len
    if len(data) < header_end:
        raise ModelTruncatedError(f"{path}: truncated header")
    try:
        header = json.loads(data[10:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"{path}: malformed header ({e})") from None
    payload_len = sum(int(np.prod(shape)) for _, shape in header["tensors"]) * 4
    payload_end = header_end + payload_len
    if len(data) < payload_end + 4:
        raise ModelTruncatedError(
            f"{path}: expected {payload_end + 4} bytes, file has {len(data)}"
        )
    payload = data[header_end:payload_end]
    (crc_stored,) = struct.unpack_from("<I", data, payload_end)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise ModelChecksumError(f"{path}: payload CRC32 mismatch")
    tensors = {}
    offset = 0
    for name, shape in header["tensors"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        tensors[name] = arr.reshape(shape).astype(ops.DTYPE)
        offset += count * 4
    return header, tensors


def _layer_table(net: EmbeddingNet) -> list:
    table = []
    for layer in net.layers:
        if layer.kind == "conv":
            table.append(
                {
                    "kind": "conv",
                    "name": layer.name,
                    "out_channels": layer.spec.out_channels,
                    "kernel": [layer.spec.kernel_h, layer.spec.kernel_w],
                    "stride": layer.spec.stride,
                    "groups": layer.spec.groups,
                }
            )
        elif layer.kind == "batchnorm":
            table.append({"kind": "batchnorm", "name": layer.name, "channels": len(layer.gamma)})
        elif layer.kind == "pool":
            table.append(
                {"kind": "pool", "name": layer.name, "size": layer.size, "stride": layer.stride}
            )
        elif layer.kind == "relu":
            table.append({"kind": "relu", "name": layer.name})
    return table


def save_model(net: EmbeddingNet, bias: float, path) -> None:
    header = {
        "preset": net.preset,
        "in_channels": net.in_channels,
        "layers": _layer_table(net),
    }
    tensors = list(net.state_items())
    tensors.append(("score_bias", np.array([bias], dtype=ops.DTYPE)))
    write_blob(path, MODEL_MAGIC, header, tensors)


def load_model(path, expect_preset: str | None = None):
    """Load (net, bias) from a model file. With expect_preset set, the stored
    layer geometry must match that preset exactly."""
    header, tensors = read_blob(path, MODEL_MAGIC)
    net = EmbeddingNet(preset=header["preset"], in_channels=header["in_channels"])
    c = net.in_channels
    for entry in header["layers"]:
        kind = entry["kind"]
        if kind == "conv":
            spec = ConvSpec(
                kernel_h=entry["kernel"][0],
                kernel_w=entry["kernel"][1],
                stride=entry["stride"],
                groups=entry["groups"],
                out_channels=entry["out_channels"],
            )
            w = tensors[f"{entry['name']}.w"]
            b = tensors[f"{entry['name']}.b"]
            expected_w = (spec.out_channels, c // spec.groups, spec.kernel_h, spec.kernel_w)
            if w.shape != expected_w:
                raise ShapeError(
                    f"{entry['name']}: stored weight shape {w.shape} != {expected_w}"
                )
            net.layers.append(ConvLayer(name=entry["name"], spec=spec, w=w.copy(), b=b.copy()))
            c = spec.out_channels
        elif kind == "batchnorm":
            name = entry["name"]
            net.layers.append(
                BatchNormLayer(
                    name=name,
                    gamma=tensors[f"{name}.gamma"].copy(),
                    beta=tensors[f"{name}.beta"].copy(),
                    running_mean=tensors[f"{name}.running_mean"].copy(),
                    running_var=tensors[f"{name}.running_var"].copy(),
                )
            )
        elif kind == "pool":
            net.layers.append(
                PoolLayer(name=entry["name"], size=entry["size"], stride=entry["stride"])
            )
        elif kind == "relu":
            net.layers.append(ReluLayer(name=entry["name"]))
        else:
            raise ModelFormatError(f"{path}: unknown layer kind {kind!r}")
    bias = float(tensors["score_bias"][0])
    if expect_preset is not None:
        _check_against_preset(net, expect_preset, path)
    return net, bias


def _check_against_preset(net: EmbeddingNet, preset: str, path) -> None:
    want = build_net(preset)
    got_shapes = [(k, v.shape) for k, v in net.state_items()]
    want_shapes = [(k, v.shape) for k, v in want.state_items()]
    if got_shapes != want_shapes:
        for (gk, gs), (wk, ws) in zip(got_shapes, want_shapes):
            if gk != wk or gs != ws:
                raise ShapeError(
                    f"{path}: stored {gk} shaped {gs} does not match preset "
                    f"{preset!r} expectation {wk} shaped {ws}"
                )
        raise ShapeError(
            f"{path}: stored net (preset {net.preset!r}, {len(got_shapes)} arrays) does not "
            f"match preset {preset!r} ({len(want_shapes)} arrays)"
        )
