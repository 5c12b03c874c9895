"""IAMC checkpoint files.

Layout (little-endian)::

    b"IAMC" | u32 version=1 | u32 config_len | config_len bytes of UTF-8 "key=value\\n"
    then per parameter, in store order:
    u16 name_len | name | u32 rank | u32 dims[rank] | f32 data[prod(dims)]
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .cell import CellConfig, init_params
from .datagen import ParseError
from .numerics import ContractError, ParamStore, Rng

MAGIC = b"IAMC"
VERSION = 1


def encode_config(values: dict) -> bytes:
    lines = []
    for key, value in values.items():
        if "=" in key or "\n" in str(value) or "\n" in key:
            raise ValueError(f"config entry not encodable: {key!r}")
        lines.append(f"{key}={value}\n")
    return "".join(lines).encode("utf-8")


def decode_config(raw: bytes) -> dict[str, str]:
    out = {}
    for line in raw.decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"config line without '=': {line!r}")
        out[key.strip()] = value.strip()
    return out


def dumps(cfg: CellConfig, params: ParamStore, meta: dict | None = None) -> bytes:
    values = cfg.to_dict()
    values.update(meta or {})
    block = encode_config(values)
    parts = [MAGIC, struct.pack("<II", VERSION, len(block)), block]
    for name, value in params.items():
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        parts.append(np.asarray(value, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path: str | Path, cfg: CellConfig, params: ParamStore,
                    meta: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(cfg, params, meta))
    tmp.replace(path)


def loads(raw: bytes, path: str | None = None) -> tuple[CellConfig, ParamStore, dict]:
    def need(offset: int, n: int) -> None:
        if offset + n > len(raw):
            raise ParseError(f"truncated checkpoint: need {n} bytes, "
                             f"{len(raw) - offset} left", offset, path)

    if raw[:4] != MAGIC:
        raise ParseError(f"bad magic {raw[:4]!r}", 0, path)
    need(4, 8)
    version, clen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 4, path)
    off = 12
    need(off, clen)
    values = decode_config(raw[off:off + clen])
    off += clen
    params = ParamStore()
    while off < len(raw):
        need(off, 2)
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        need(off, nlen)
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        need(off, 4)
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        need(off, 4 * rank)
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        need(off, nbytes)
        data = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=off)
        params.add(name, data.astype(np.float32).reshape(dims))
        off += nbytes
    try:
        cfg = CellConfig.from_dict(values)
    except (ValueError, ContractError) as exc:
        raise ParseError(f"invalid config block: {exc}", 12, path) from exc
    expected = {name: p.shape for name, p in init_params(cfg, Rng(0)).items()}
    found = {name: p.shape for name, p in params.items()}
    if expected != found:
        missing = sorted(set(expected) - set(found))
        extra = sorted(set(found) - set(expected))
        bad = sorted(n for n in set(expected) & set(found) if expected[n] != found[n])
        raise ParseError(f"parameters do not match config (missing={missing}, "
                         f"unexpected={extra}, wrong shape={bad})", off, path)
    meta = {k: v for k, v in values.items() if k not in cfg.to_dict()}
    return cfg, params, meta


def load_checkpoint(path: str | Path) -> tuple[CellConfig, ParamStore, dict]:
    return loads(Path(path).read_bytes(), str(path))
