"""Binary trace-set serialization.

Little-endian layout: a 23-byte header (magic "PROT", u16 format
version, f64 sample rate, u32 trace count, u32 samples per trace, u8
flags with bit 0 marking class labels present), then one record per
trace holding the 16-byte plaintext, 16-byte ciphertext, optional label
byte, and the float32 samples.  Seed and notes are runtime metadata and
are not persisted.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import InputError
from .sca import TraceSet

MAGIC = b"PROT"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sHdIIB")
_FLAG_LABELS = 0x01


def write_traces(path: str | os.PathLike, trace_set: TraceSet) -> None:
    """Serialize a trace set, atomically replacing any existing file."""
    path = Path(path)
    flags = _FLAG_LABELS if trace_set.class_labels is not None else 0
    parts = [
        _HEADER.pack(
            MAGIC,
            FORMAT_VERSION,
            float(trace_set.sample_rate),
            trace_set.n_traces,
            trace_set.samples_per_trace,
            flags,
        )
    ]
    samples = np.ascontiguousarray(trace_set.traces, dtype="<f4")
    for i in range(trace_set.n_traces):
        parts.append(trace_set.plaintexts[i].tobytes())
        parts.append(trace_set.ciphertexts[i].tobytes())
        if flags & _FLAG_LABELS:
            parts.append(bytes([int(trace_set.class_labels[i])]))
        parts.append(samples[i].tobytes())
    blob = b"".join(parts)

    fd, tmp_name = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise


def read_traces(path: str | os.PathLike) -> TraceSet:
    """Load a trace set written by write_traces.

    The returned set has seed=None and empty notes; those fields are not
    part of the on-disk format.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise InputError(f"no such trace file: {path}") from None
    if len(blob) < _HEADER.size:
        raise InputError(f"truncated trace file: {path}")
    magic, version, sample_rate, n_traces, n_samples, flags = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise InputError(f"bad magic in {path}: not a trace file")
    if version != FORMAT_VERSION:
        raise InputError(f"unsupported trace format version {version} in {path}")

    has_labels = bool(flags & _FLAG_LABELS)
    record = 32 + (1 if has_labels else 0) + 4 * n_samples
    expected = _HEADER.size + n_traces * record
    if len(blob) != expected:
        raise InputError(
            f"truncated trace file: {path} holds {len(blob)} bytes, expected {expected}"
        )

    traces = np.empty((n_traces, n_samples), dtype=np.float32)
    plaintexts = np.empty((n_traces, 16), dtype=np.uint8)
    ciphertexts = np.empty((n_traces, 16), dtype=np.uint8)
    labels = np.empty(n_traces, dtype=np.uint8) if has_labels else None
    off = _HEADER.size
    for i in range(n_traces):
        plaintexts[i] = np.frombuffer(blob, dtype=np.uint8, count=16, offset=off)
        off += 16
        ciphertexts[i] = np.frombuffer(blob, dtype=np.uint8, count=16, offset=off)
        off += 16
        if has_labels:
            labels[i] = blob[off]
            off += 1
        traces[i] = np.frombuffer(blob, dtype="<f4", count=n_samples, offset=off)
        off += 4 * n_samples
    return TraceSet(
        sample_rate=sample_rate,
        traces=traces,
        plaintexts=plaintexts,
        ciphertexts=ciphertexts,
        class_labels=labels,
        seed=None,
        notes=(),
    )
