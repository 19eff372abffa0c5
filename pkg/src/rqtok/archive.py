"""Binary codebook archives.

Layout (all little-endian)::

    magic      4s   b"BRQC"
    version    u16
    flags      u16  bit 0: EMA block present
    M          u32
    D          u32
    width      u32  bytes per float (4 or 8)
    norm       u32  index into NORMALIZATION_MODES
    soft_k     u32
    K_m        u32 * M
    payload    stage-major code vectors, M blocks of K_m * D floats
    ema        optional; per stage: gamma f64, eps f64, step u64,
               counts K_m floats, embed_sum K_m * D floats

Counts and sums in the EMA block use the archive float width.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .codebook_training import EmaState
from .quantizer import NORMALIZATION_MODES, Codebook, ResidualQuantizer

MAGIC = b"BRQC"
VERSION = 1
_HEAD = struct.Struct("<4sHHIIIII")
_EMA_HEAD = struct.Struct("<ddQ")
_FLAG_EMA = 1


class ArchiveError(ValueError):
    pass


def _dtype(width: int) -> np.dtype:
    if width == 8:
        return np.dtype("<f8")
    if width == 4:
        return np.dtype("<f4")
    raise ArchiveError(f"unsupported float width {width} bytes")


def header_size(num_stages: int) -> int:
    return _HEAD.size + 4 * num_stages


def encode_codebooks(rq: ResidualQuantizer, ema: Optional[Sequence[EmaState]] = None,
                     width: int = 8) -> bytes:
    dt = _dtype(width)
    if ema is not None and len(ema) != rq.num_stages:
        raise ArchiveError(f"{len(ema)} EMA states for {rq.num_stages} stages")
    flags = _FLAG_EMA if ema is not None else 0
    parts = [
        _HEAD.pack(MAGIC, VERSION, flags, rq.num_stages, rq.dim, width,
                   NORMALIZATION_MODES.index(rq.normalization), rq.soft_k),
        struct.pack(f"<{rq.num_stages}I", *rq.sizes),
    ]
    parts += [cb.vectors.astype(dt).tobytes() for cb in rq.stages]
    if ema is not None:
        for cb, st in zip(rq.stages, ema):
            if st.counts.shape != (cb.size,) or st.embed_sum.shape != cb.vectors.shape:
                raise ArchiveError("EMA state shape does not match its codebook")
            parts.append(_EMA_HEAD.pack(st.gamma, st.eps, st.step))
            parts.append(st.counts.astype(dt).tobytes())
            parts.append(st.embed_sum.astype(dt).tobytes())
    return b"".join(parts)


def decode_codebooks(blob: bytes) -> tuple:
    """Inverse of :func:`encode_codebooks`; returns ``(rq, ema or None, width)``."""
    if len(blob) < _HEAD.size:
        raise ArchiveError("truncated archive header")
    magic, version, flags, M, D, width, norm, soft_k = _HEAD.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ArchiveError(f"bad magic {magic!r}, not a codebook archive")
    if version != VERSION:
        raise ArchiveError(f"archive version {version} is not supported (expected {VERSION})")
    if M < 1 or norm >= len(NORMALIZATION_MODES):
        raise ArchiveError("corrupt archive header")
    dt = _dtype(width)
    off = _HEAD.size
    if len(blob) < off + 4 * M:
        raise ArchiveError("truncated archive header")
    sizes = struct.unpack_from(f"<{M}I", blob, off)
    off += 4 * M

    def take(n_floats: int) -> np.ndarray:
        nonlocal off
        n_bytes = n_floats * width
        if len(blob) < off + n_bytes:
            raise ArchiveError(f"truncated archive: need {off + n_bytes} bytes, have {len(blob)}")
        arr = np.frombuffer(blob, dtype=dt, count=n_floats, offset=off).astype(np.float64)
        off += n_bytes
        return arr

    stages = [Codebook(take(K * D).reshape(K, D), m + 1) for m, K in enumerate(sizes)]
    ema = None
    if flags & _FLAG_EMA:
        ema = []
        for K in sizes:
            if len(blob) < off + _EMA_HEAD.size:
                raise ArchiveError("truncated archive: EMA block")
            gamma, eps, step = _EMA_HEAD.unpack_from(blob, off)
            off += _EMA_HEAD.size
            counts = take(K)
            embed = take(K * D).reshape(K, D)
            ema.append(EmaState(counts, embed, gamma, eps, step))
    if off != len(blob):
        raise ArchiveError(f"{len(blob) - off} trailing bytes after archive payload")
    rq = ResidualQuantizer(stages, normalization=NORMALIZATION_MODES[norm], soft_k=soft_k)
    return rq, ema, width


def atomic_write(path, data) -> int:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(data)


def save_codebooks(rq: ResidualQuantizer, path, ema: Optional[Sequence[EmaState]] = None,
                   width: int = 8) -> int:
    """Returns the number of bytes written."""
    return atomic_write(path, encode_codebooks(rq, ema, width))


def load_codebooks(path) -> tuple:
    """Returns ``(rq, ema)``; ``ema`` is None when the archive has no EMA block."""
    rq, ema, _ = decode_codebooks(Path(path).read_bytes())
    return rq, ema
