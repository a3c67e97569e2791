"""Binary checkpoint container.

Layout (all integers little-endian uint32)::

    b"ULRN1"
    header_len, header bytes      UTF-8 "key=value" lines
    repeated until EOF:
        name_len, name bytes
        rank, dims[rank]
        float32 data, row-major

Model weights use their parameter names; adapters are stored as
``lora.<target>.A`` / ``lora.<target>.B``; optimizer state as ``opt.*``.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, UlrnError
from .model import LoraAdapter, ModelConfig, ModelParams, param_shapes
from .tensor import Tensor

MAGIC = b"ULRN1"
_U32 = struct.Struct("<I")
_CONFIG_FIELDS = ("vocab_size", "d_model", "n_layers", "n_heads", "context_len", "seed")


class CheckpointError(UlrnError, IOError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    adapters: dict[str, LoraAdapter] = field(default_factory=dict)
    header: dict[str, str] = field(default_factory=dict)
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def tag(self) -> str:
        return self.header.get("tag", "")

    @property
    def meta(self) -> dict[str, str]:
        """Header entries that were passed in as ``meta`` (config and adapter keys removed)."""
        return {k: v for k, v in self.header.items() if k not in _CONFIG_FIELDS and not k.startswith("lora.")}


def _encode_header(config: ModelConfig, meta: dict) -> bytes:
    lines = [f"{k}={getattr(config, k)}" for k in _CONFIG_FIELDS]
    for key in sorted(meta):
        if key in _CONFIG_FIELDS:
            raise ContractError(f"header entry {key!r} would shadow a model config field")
        value = str(meta[key])
        if "\n" in value or "=" in key:
            raise ContractError(f"header entry {key!r} cannot contain newlines or '=' in the key")
        lines.append(f"{key}={value}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _decode_header(raw: bytes) -> dict[str, str]:
    out = {}
    for line in raw.decode("utf-8").splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed header line {line!r}")
        out[key] = value
    return out


def _write_tensor(buf, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    buf.write(_U32.pack(len(nb)))
    buf.write(nb)
    buf.write(_U32.pack(arr.ndim))
    for dim in arr.shape:
        buf.write(_U32.pack(dim))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def dumps(
    params: ModelParams,
    adapters: dict[str, LoraAdapter] | None = None,
    meta: dict | None = None,
    extras: dict[str, np.ndarray] | None = None,
) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    header = dict(meta or {})
    if adapters:
        alphas = {ad.alpha for ad in adapters.values()}
        if len(alphas) != 1:
            raise ContractError("all adapters in one checkpoint must share alpha")
        header["lora.alpha"] = repr(float(alphas.pop()))
    hb = _encode_header(params.config, header)
    buf.write(_U32.pack(len(hb)))
    buf.write(hb)
    for name, t in params.items():
        _write_tensor(buf, name, t.data)
    for name, ad in (adapters or {}).items():
        _write_tensor(buf, f"lora.{name}.A", ad.A.data)
        _write_tensor(buf, f"lora.{name}.B", ad.B.data)
    for name, arr in (extras or {}).items():
        _write_tensor(buf, name, np.asarray(arr))
    return buf.getvalue()


def save(path, params, adapters=None, meta=None, extras=None) -> Path:
    """Write atomically: data goes to a temp file that is then renamed."""
    path = Path(path)
    data = dumps(params, adapters, meta, extras)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def loads(data: bytes, dtype=None, requires_grad: bool = True) -> Checkpoint:
    if not data.startswith(MAGIC):
        raise CheckpointError("not a ULRN1 checkpoint (bad magic)")
    pos = len(MAGIC)

    def u32():
        nonlocal pos
        if pos + 4 > len(data):
            raise CheckpointError("truncated checkpoint")
        (v,) = _U32.unpack_from(data, pos)
        pos += 4
        return v

    hlen = u32()
    header = _decode_header(data[pos:pos + hlen])
    pos += hlen
    try:
        config = ModelConfig(**{k: int(header[k]) for k in _CONFIG_FIELDS})
    except KeyError as exc:
        raise CheckpointError(f"header lacks config field {exc}") from exc
    arrays: dict[str, np.ndarray] = {}
    while pos < len(data):
        nlen = u32()
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        rank = u32()
        shape = tuple(u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        end = pos + 4 * count
        if end > len(data):
            raise CheckpointError(f"truncated data for {name}")
        arrays[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos = end

    def mk(arr):
        return Tensor(arr, requires_grad=requires_grad, dtype=dtype or np.float32)

    names = list(param_shapes(config))
    missing = [n for n in names if n not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint missing weights: {missing}")
    params = ModelParams(config, {n: mk(arrays[n]) for n in names})
    adapters = {}
    alpha = float(header.get("lora.alpha", "8.0"))
    for name in arrays:
        if name.startswith("lora.") and name.endswith(".A"):
            target = name[len("lora."):-len(".A")]
            A, B = arrays[name], arrays.get(f"lora.{target}.B")
            if B is None:
                raise CheckpointError(f"adapter {target} lacks its B matrix")
            adapters[target] = LoraAdapter(target, mk(A), mk(B), rank=A.shape[0], alpha=alpha)
    known = set(names) | {f"lora.{t}.{m}" for t in adapters for m in "AB"}
    extras = {n: a.copy() for n, a in arrays.items() if n not in known}
    return Checkpoint(config, params, adapters, header, extras)


def load(path, dtype=None, requires_grad: bool = True) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data, dtype=dtype, requires_grad=requires_grad)


def params_digest(params: ModelParams) -> str:
    """SHA-256 over names and raw bytes; used to assert that weights were not touched."""
    h = hashlib.sha256()
    for name, t in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
