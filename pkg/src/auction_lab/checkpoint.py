"""Sectioned binary container for networks, arrays and JSON metadata.

Layout (little-endian): ``b"ALGN"``, u16 format version, u32 n, u32 m,
u32 section count, then per section: u16 name length, UTF-8 name, u8 kind
and a payload. Kind 0 is a network record (six u32 spec fields, optional
f64 output bounds, f64 parameters in layer order with row-major weights
followed by biases), kind 1 a u32-length JSON blob, kind 2 a u32 ndim,
u32 dims and f64 data.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .auctioneer import AuctioneerParams
from .distributions import AuctionShape
from .misreporter import MisreporterParams
from .nn import (
    FORMAT_VERSION,
    MAGIC,
    CheckpointError,
    HeaderError,
    LengthMismatchError,
    MlpParams,
    _Reader,
    pack_network,
    read_header,
    unpack_network,
)

KIND_NETWORK, KIND_JSON, KIND_ARRAY = 0, 1, 2


def pack_container(shape: AuctionShape, sections: dict) -> bytes:
    out = [MAGIC, struct.pack("<H", FORMAT_VERSION), struct.pack("<3I", shape.n, shape.m, len(sections))]
    for name, value in sections.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        if isinstance(value, MlpParams):
            out.append(struct.pack("<B", KIND_NETWORK) + pack_network(value))
        elif isinstance(value, np.ndarray):
            arr = np.ascontiguousarray(value, dtype="<f8")
            out.append(struct.pack("<BI", KIND_ARRAY, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(arr.tobytes())
        else:
            blob = json.dumps(value, sort_keys=True).encode("utf-8")
            out.append(struct.pack("<BI", KIND_JSON, len(blob)) + blob)
    return b"".join(out)


def unpack_container(data: bytes):
    """Return ``(shape, {name: MlpParams | ndarray | json value})``."""
    reader = _Reader(data)
    read_header(reader)
    n, m, count = reader.unpack("<3I")
    try:
        shape = AuctionShape(n, m)
    except ValueError as exc:
        raise HeaderError(str(exc)) from exc
    sections = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = bytes(reader.take(name_len)).decode("utf-8")
        (kind,) = reader.unpack("<B")
        if kind == KIND_NETWORK:
            sections[name] = unpack_network(reader)
        elif kind == KIND_ARRAY:
            (ndim,) = reader.unpack("<I")
            dims = reader.unpack(f"<{ndim}I") if ndim else ()
            size = int(np.prod(dims)) if dims else 1
            sections[name] = np.frombuffer(reader.take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
        elif kind == KIND_JSON:
            (length,) = reader.unpack("<I")
            try:
                sections[name] = json.loads(bytes(reader.take(length)).decode("utf-8"))
            except ValueError as exc:
                raise CheckpointError(f"section {name!r}: bad JSON") from exc
        else:
            raise HeaderError(f"section {name!r} has unknown kind {kind}")
    if not reader.done():
        raise LengthMismatchError(f"{len(reader.data) - reader.pos} trailing bytes")
    return shape, sections


def auctioneer_sections(params: AuctioneerParams, prefix: str = "") -> dict:
    return {prefix + "f1": params.f1, prefix + "f2": params.f2, prefix + "pay": params.pay}


def auctioneer_from_sections(shape: AuctionShape, sections: dict, prefix: str = "") -> AuctioneerParams:
    try:
        return AuctioneerParams(shape, sections[prefix + "f1"], sections[prefix + "f2"], sections[prefix + "pay"])
    except KeyError as exc:
        raise CheckpointError(f"missing auctioneer section {exc}") from exc
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc


def save_mechanism(path, auct: AuctioneerParams, mis: MisreporterParams = None, meta: dict = None) -> None:
    sections = auctioneer_sections(auct)
    if mis is not None:
        sections["misreporter"] = mis.net
    if meta is not None:
        sections["meta"] = meta
    write_atomic(path, pack_container(auct.shape, sections))


def load_mechanism(path):
    """Return ``(AuctioneerParams, MisreporterParams | None, meta | None)``."""
    with open(path, "rb") as fh:
        shape, sections = unpack_container(fh.read())
    auct = auctioneer_from_sections(shape, sections)
    mis = None
    if "misreporter" in sections:
        try:
            mis = MisreporterParams(shape, sections["misreporter"])
        except ValueError as exc:
            raise CheckpointError(str(exc)) from exc
    return auct, mis, sections.get("meta")


def write_atomic(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
