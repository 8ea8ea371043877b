"""Binary tensor container (.ect) and dataset manifest I/O.

The .ect layout is fixed: magic ``ECT1``, u8 rank, rank u32 little-endian
extents, then the float32 payload in row-major order. Every module in the
pipeline exchanges tensors through this container, bit-exactly.

A dataset manifest is UTF-8 text, one record per line with tab-separated
fields ``path<TAB>label_id<TAB>cycle_start<TAB>cycle_len``. Lines starting
with ``#`` are comments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ECT_MAGIC = b"ECT1"
MAX_RANK = 5


class EctError(ValueError):
    """Malformed .ect container."""


def write_ect(path, array) -> None:
    """Write ``array`` (rank 1..5, any float dtype) as float32 .ect."""
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > MAX_RANK:
        raise EctError(f"rank {arr.ndim} exceeds container limit of {MAX_RANK}")
    if any(e < 1 for e in arr.shape):
        raise EctError(f"all extents must be >= 1, got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(ECT_MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_ect(path) -> np.ndarray:
    """Read an .ect file back into a float32 array."""
    raw = Path(path).read_bytes()
    if len(raw) < 5:
        raise EctError(f"{path}: file too short for header")
    if raw[:4] != ECT_MAGIC:
        raise EctError(f"{path}: bad magic {raw[:4]!r}")
    rank = raw[4]
    if not 1 <= rank <= MAX_RANK:
        raise EctError(f"{path}: rank {rank} out of range 1..{MAX_RANK}")
    header_end = 5 + 4 * rank
    if len(raw) < header_end:
        raise EctError(f"{path}: truncated extent table")
    shape = struct.unpack(f"<{rank}I", raw[5:header_end])
    if any(e < 1 for e in shape):
        raise EctError(f"{path}: zero extent in {shape}")
    count = int(np.prod(shape))
    payload = raw[header_end:]
    if len(payload) != 4 * count:
        raise EctError(
            f"{path}: payload holds {len(payload)} bytes, expected {4 * count}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


@dataclass
class ManifestRow:
    path: str
    label_id: int
    cycle_start: int
    cycle_len: int

    @property
    def sample_id(self) -> str:
        return Path(self.path).stem


def read_manifest(path) -> list[ManifestRow]:
    rows = []
    base = Path(path).parent
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
        clip_path, label_s, start_s, len_s = fields
        try:
            label, start, length = int(label_s), int(start_s), int(len_s)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: non-integer field: {exc}") from None
        p = Path(clip_path)
        if not p.is_absolute():
            p = base / p
        rows.append(ManifestRow(str(p), label, start, length))
    return rows


def write_manifest(path, rows) -> None:
    base = Path(path).parent
    lines = ["# path\tlabel_id\tcycle_start\tcycle_len"]
    for r in rows:
        p = Path(r.path)
        try:
            rel = p.relative_to(base)
        except ValueError:
            rel = p
        lines.append(f"{rel}\t{r.label_id}\t{r.cycle_start}\t{r.cycle_len}")
    Path(path).write_text("\n".join(lines) + "\n")
