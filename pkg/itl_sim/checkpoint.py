"""Self-describing binary checkpoints exchanged between centers.

Layout (all integers little-endian)::

    b"ITLC"                 magic
    uint32                  format version
    uint64                  header length H
    uint64                  blob length L
    H bytes                 UTF-8 JSON header, sorted keys
    L bytes                 tensor blob, little-endian float64, C order
    32 bytes                SHA-256 over everything above

The header holds the tensor directory (name, dtype, shape, byte offset) and the
scalar metadata: optimizer hyper-parameters and counters, regularizer settings
and artifact versions, provenance, training RNG state and the accuracy history
of the run so far.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from .errors import ChecksumError, CheckpointError, TruncatedCheckpointError, VersionMismatchError
from .optimizers import AdamState, OptimizerState, SgdState
from .regularizers import (
    EncoderState,
    ImmArchive,
    RegularizerSettings,
    RegularizerState,
    SiAccumulator,
    TeacherSnapshot,
)
from .tensor_nn import ParameterSet

logger = logging.getLogger(__name__)

MAGIC = b"ITLC"
FORMAT_VERSION = 1
EXTENSION = ".itlc"
_PREFIX = struct.Struct("<4sIQQ")
_DIGEST_SIZE = 32


@dataclass
class Checkpoint:
    """Everything a center hands to the next one."""

    params: ParameterSet
    optimizer: OptimizerState
    regularizer: RegularizerState
    provenance: Dict[str, Any] = field(default_factory=dict)
    rng_state: Optional[Dict[str, Any]] = None
    history: List[List[Optional[float]]] = field(default_factory=list)
    format_version: int = FORMAT_VERSION


def _put(tensors: Dict[str, np.ndarray], prefix: str, params: Optional[ParameterSet]) -> None:
    if params is None:
        return
    for name, value in params.items():
        tensors[f"{prefix}{name}"] = value


def _take(tensors: Dict[str, np.ndarray], prefix: str) -> Optional[ParameterSet]:
    found = {name[len(prefix):]: value for name, value in tensors.items() if name.startswith(prefix)}
    return dict(sorted(found.items())) if found else None


def _optimizer_meta(opt: OptimizerState, tensors: Dict[str, np.ndarray]) -> Dict[str, Any]:
    if isinstance(opt, AdamState):
        _put(tensors, "optimizer/m/", opt.m)
        _put(tensors, "optimizer/v/", opt.v)
        meta = {k: v for k, v in asdict(opt).items() if k not in ("m", "v")}
        return {"kind": "adam", **meta}
    return {"kind": "sgd", **asdict(opt)}


def _regularizer_meta(state: RegularizerState, tensors: Dict[str, np.ndarray]) -> Dict[str, Any]:
    meta: Dict[str, Any] = {
        "settings": asdict(state.settings),
        "visit": state.visit,
        "prev_version": state.prev_version,
        "importance_version": state.importance_version,
        "has_prev": state.prev_params is not None,
        "has_importance": state.importance is not None,
        "has_si": state.si is not None,
        "imm_beta": state.archive.beta,
        "imm_models": sorted(state.archive.models),
        "imm_fishers": sorted(state.archive.fishers),
    }
    _put(tensors, "regularizer/prev/", state.prev_params)
    _put(tensors, "regularizer/importance/", state.importance)
    if state.si is not None:
        _put(tensors, "regularizer/si/w/", state.si.w)
        _put(tensors, "regularizer/si/start/", state.si.start)
    if state.teacher is not None:
        t = state.teacher
        meta["teacher"] = {"temperature": t.temperature, "head_index": t.head_index, "version": t.version}
        _put(tensors, "regularizer/teacher/", t.params)
    if state.encoder is not None:
        e = state.encoder
        meta["encoder"] = {"alpha": e.alpha, "decoder": e.decoder, "degenerate": e.degenerate, "version": e.version}
        _put(tensors, "regularizer/encoder/", e.weights)
    for center, params in state.archive.models.items():
        _put(tensors, f"regularizer/imm/model/{center}/", params)
    for center, fisher in state.archive.fishers.items():
        _put(tensors, f"regularizer/imm/fisher/{center}/", fisher)
    return meta


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    """Serialize a checkpoint; identical checkpoints always give identical bytes."""
    tensors: Dict[str, np.ndarray] = {}
    _put(tensors, "params/", checkpoint.params)
    meta = {
        "optimizer": _optimizer_meta(checkpoint.optimizer, tensors),
        "regularizer": _regularizer_meta(checkpoint.regularizer, tensors),
        "provenance": checkpoint.provenance,
        "rng_state": checkpoint.rng_state,
        "history": checkpoint.history,
    }
    directory, chunks, offset = [], [], 0
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype="<f8")
        directory.append({"name": name, "dtype": "<f8", "shape": list(data.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps({"tensors": directory, "meta": meta}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(chunks)
    body = _PREFIX.pack(MAGIC, checkpoint.format_version, len(header), len(blob)) + header + blob
    return body + hashlib.sha256(body).digest()


def _read_tensors(directory, blob: bytes) -> Dict[str, np.ndarray]:
    tensors = {}
    for entry in directory:
        if entry["dtype"] != "<f8":
            raise CheckpointError(f"unsupported dtype {entry['dtype']!r} for tensor {entry['name']!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = entry["offset"] + 8 * count
        if end > len(blob):
            raise TruncatedCheckpointError(f"tensor {entry['name']!r} runs past the end of the blob")
        tensors[entry["name"]] = (
            np.frombuffer(blob, dtype="<f8", count=count, offset=entry["offset"]).astype(np.float64).reshape(shape)
        )
    return tensors


def _decode_optimizer(meta: Dict[str, Any], tensors) -> OptimizerState:
    meta = dict(meta)
    kind = meta.pop("kind")
    if kind == "adam":
        return AdamState(m=_take(tensors, "optimizer/m/") or {}, v=_take(tensors, "optimizer/v/") or {}, **meta)
    if kind == "sgd":
        return SgdState(**meta)
    raise CheckpointError(f"unknown optimizer kind {kind!r}")


def _decode_regularizer(meta: Dict[str, Any], tensors) -> RegularizerState:
    settings = RegularizerSettings(**meta["settings"])
    si = None
    if meta["has_si"]:
        si = SiAccumulator(
            w=_take(tensors, "regularizer/si/w/") or {},
            start=_take(tensors, "regularizer/si/start/") or {},
        )
    teacher = None
    if "teacher" in meta:
        teacher = TeacherSnapshot(params=_take(tensors, "regularizer/teacher/") or {}, **meta["teacher"])
    encoder = None
    if "encoder" in meta:
        encoder = EncoderState(weights=_take(tensors, "regularizer/encoder/") or {}, **meta["encoder"])
    archive = ImmArchive(
        models={c: _take(tensors, f"regularizer/imm/model/{c}/") for c in meta["imm_models"]},
        fishers={c: _take(tensors, f"regularizer/imm/fisher/{c}/") for c in meta["imm_fishers"]},
        beta=meta["imm_beta"],
    )
    return RegularizerState(
        settings=settings,
        visit=meta["visit"],
        prev_params=_take(tensors, "regularizer/prev/") if meta["has_prev"] else None,
        prev_version=meta["prev_version"],
        importance=_take(tensors, "regularizer/importance/") if meta["has_importance"] else None,
        importance_version=meta["importance_version"],
        si=si,
        teacher=teacher,
        encoder=encoder,
        archive=archive,
    )


def decode_checkpoint(data: bytes) -> Checkpoint:
    """Parse and verify a checkpoint produced by ``encode_checkpoint``.

    Raises
    ------
    TruncatedCheckpointError
        The stream is shorter than its declared layout.
    VersionMismatchError
        The stream was written by an incompatible format version.
    ChecksumError
        The trailing digest does not match the content.
    """
    if len(data) < _PREFIX.size:
        raise TruncatedCheckpointError(f"checkpoint is {len(data)} bytes, shorter than its fixed prefix")
    magic, version, header_len, blob_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint stream (bad magic bytes)")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    expected = _PREFIX.size + header_len + blob_len + _DIGEST_SIZE
    if len(data) < expected:
        raise TruncatedCheckpointError(f"checkpoint is {len(data)} bytes, layout declares {expected}")
    if len(data) > expected:
        raise CheckpointError(f"{len(data) - expected} unexpected trailing bytes after checkpoint")
    body, digest = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint digest mismatch; the stream was corrupted")
    start = _PREFIX.size
    header = json.loads(body[start : start + header_len].decode("utf-8"))
    tensors = _read_tensors(header["tensors"], body[start + header_len :])
    meta = header["meta"]
    return Checkpoint(
        params=_take(tensors, "params/") or {},
        optimizer=_decode_optimizer(meta["optimizer"], tensors),
        regularizer=_decode_regularizer(meta["regularizer"], tensors),
        provenance=meta["provenance"],
        rng_state=meta["rng_state"],
        history=meta["history"],
        format_version=version,
    )


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    if not path.suffix:
        path = path.with_suffix(EXTENSION)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(checkpoint))
    logger.debug("checkpoint written to %s", path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data)
