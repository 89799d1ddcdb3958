"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"PHRN" | u32 version | u32 meta_len | meta (UTF-8 JSON) | u32 tensor_count
    tensor_count x record:
        u16 path_len | path (UTF-8) | u8 dtype | u8 kind | u8 ndim | ndim x u32 dim | payload

``dtype`` 0 is float32 (the only payload type), ``kind`` one of ``KINDS``.
The JSON meta carries the config snapshot, step counter, data-stream RNG
state, per-store Adam step counts and running loss averages.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import TrainConfig

MAGIC = b"PHRN"
VERSION = 1
KINDS = ("param", "buffer", "adam_m", "adam_v")
DTYPE_TAGS = {0: np.dtype("<f4")}
_F32 = 0


class CheckpointError(ValueError):
    pass


def _records(state) -> list[tuple[str, str, np.ndarray]]:
    out = []
    for store in state.all_stores():
        for path, t in store.params.items():
            out.append((path, "param", t.data))
        for path, buf in store.buffers.items():
            out.append((path, "buffer", buf))
        for path, slot in store.adam.items():
            out.append((path, "adam_m", slot.m))
            out.append((path, "adam_v", slot.v))
    return out


def _encode(meta: dict, records) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(records))]
    for path, kind, arr in records:
        if arr.dtype != np.float32:
            raise CheckpointError(f"{path}: only float32 tensors can be saved, got {arr.dtype}")
        name = path.encode("utf-8")
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<BBB", _F32, KINDS.index(kind), arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        have = len(self.buf) - self.pos
        if have < n:
            raise CheckpointError(f"{self.path}: truncated while reading {what}: expected {n} bytes, found {have}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _decode(buf: bytes, path) -> tuple[dict, list[tuple[str, str, np.ndarray]]]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    r = _Reader(buf, path)
    r.pos = 4
    (version,) = r.unpack("<I", "format version")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (this build reads {VERSION})")
    (meta_len,) = r.unpack("<I", "metadata length")
    meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    (count,) = r.unpack("<I", "tensor count")
    records = []
    prev = "header"
    for i in range(count):
        where = f"record {i} (after {prev!r})"
        (name_len,) = r.unpack("<H", f"{where} name length")
        name = r.take(name_len, f"{where} name").decode("utf-8")
        dtype_tag, kind_id, ndim = r.unpack("<BBB", f"tensor {name!r} header")
        if dtype_tag not in DTYPE_TAGS:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype tag {dtype_tag}")
        if kind_id >= len(KINDS):
            raise CheckpointError(f"{path}: tensor {name!r} has unknown kind {kind_id}")
        shape = r.unpack(f"<{ndim}I", f"tensor {name!r} shape")
        dtype = DTYPE_TAGS[dtype_tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = r.take(nbytes, f"tensor {name!r} payload")
        arr = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(np.float32)
        records.append((name, KINDS[kind_id], arr))
        prev = name
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes after last tensor")
    return meta, records


def save_checkpoint(state, path) -> None:
    meta = {
        "config": state.config.to_dict(),
        "step": state.step,
        "stream": state.stream.state_dict() if state.stream is not None else state.stream_state,
        "adam_step": {s.name: s.adam_step for s in state.all_stores()},
        "loss_avg": state.loss_avg,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(_encode(meta, _records(state)))
    tmp.replace(path)


def _apply(state, records) -> None:
    params, buffers, adam = {}, {}, {}
    for store in state.all_stores():
        params.update(store.params)
        buffers.update(store.buffers)
        adam.update(store.adam)
    seen = set()
    for name, kind, arr in records:
        seen.add((name, kind))
        if kind == "param":
            target = params.get(name)
            current = target.data if target is not None else None
        elif kind == "buffer":
            current = buffers.get(name)
        else:
            slot = adam.get(name)
            current = None if slot is None else (slot.m if kind == "adam_m" else slot.v)
        if current is None:
            raise CheckpointError(f"checkpoint tensor {name!r} ({kind}) does not exist in this model")
        if current.shape != arr.shape:
            raise CheckpointError(f"{name!r} ({kind}): shape {arr.shape} does not match model {current.shape}")
        if kind == "param":
            target.data = arr.copy()
        else:
            np.copyto(current, arr)
    expected = {(n, k) for n, k, _ in _records(state)}
    missing = sorted(expected - seen)
    if missing:
        raise CheckpointError(f"checkpoint lacks {len(missing)} tensors, e.g. {missing[0]}")


def load_checkpoint(path, corpus=None):
    """Rebuild a ``TrainState``; with ``corpus`` the data stream is restored too."""
    from .training import TrainState, build_models

    meta, records = _decode(Path(path).read_bytes(), path)
    config = TrainConfig.from_dict(meta["config"])
    gen, discs = build_models(config)
    state = TrainState(config, gen, discs, step=int(meta["step"]), loss_avg=dict(meta["loss_avg"]))
    _apply(state, records)
    for store in state.all_stores():
        store.adam_step = int(meta["adam_step"].get(store.name, 0))
    state.stream_state = meta.get("stream")
    if corpus is not None:
        state.attach_stream(corpus)
    return state


def save_encoder_weights(generator, path) -> None:
    store = generator.encoder.store
    records = [(p, "param", t.data) for p, t in store.params.items()]
    Path(path).write_bytes(_encode({"encoder": store.name}, records))


def load_encoder_weights(generator, path) -> None:
    meta, records = _decode(Path(path).read_bytes(), path)
    store = generator.encoder.store
    if meta.get("encoder") != store.name:
        raise CheckpointError(f"{path}: not an encoder weight file")
    by_name = {n: a for n, k, a in records if k == "param"}
    for p, t in store.params.items():
        if p not in by_name:
            raise CheckpointError(f"{path}: missing encoder tensor {p!r}")
        if by_name[p].shape != t.shape:
            raise CheckpointError(f"{p!r}: shape {by_name[p].shape} does not match model {t.shape}")
        t.data = by_name[p].copy()
