"""Record persistence, CSV ingestion and ICD-10 Chapter IX code handling.

Binary record layout ("LECG", little-endian)::

    magic      4 bytes  b"LECG"
    version    u16      1
    n_leads    u16
    n_samples  u32
    fs         f32      sampling rate in Hz
    names      n_leads x 8 bytes ASCII, space padded
    samples    n_leads x n_samples f32, lead-major

The record id is not part of the payload; it is the file stem.
"""

from __future__ import annotations

import csv
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STANDARD_LEADS = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")

RECORD_MAGIC = b"LECG"
RECORD_VERSION = 1
_HEADER = struct.Struct("<4sHHIf")
_NAME_BYTES = 8


class RecordFormatError(ValueError):
    pass


class BadMagicError(RecordFormatError):
    pass


class VersionMismatchError(RecordFormatError):
    pass


class TruncatedPayloadError(RecordFormatError):
    pass


class CsvFormatError(ValueError):
    pass


class EmptyCsvError(CsvFormatError):
    pass


class RaggedRowError(CsvFormatError):
    pass


class NonNumericCellError(CsvFormatError):
    pass


@dataclass(eq=False)
class EcgRecord:
    """One multi-lead recording.

    Samples are held as float64 but rounded to float32 precision on
    construction, so that writing and reading back is exact.
    """

    lead_names: tuple
    sampling_rate: float
    samples: np.ndarray
    record_id: str = "record"

    def __post_init__(self):
        self.lead_names = tuple(str(n) for n in self.lead_names)
        self.samples = np.asarray(self.samples, dtype=np.float32).astype(np.float64)
        if self.samples.ndim != 2:
            raise ValueError("samples must be a (n_leads, n_samples) matrix")
        if len(self.lead_names) < 1 or len(self.lead_names) != self.samples.shape[0]:
            raise ValueError("need one lead name per sample row and at least one lead")
        if len(set(self.lead_names)) != len(self.lead_names):
            raise ValueError("lead names must be unique")
        self.sampling_rate = float(np.float32(self.sampling_rate))
        if not self.sampling_rate > 0:
            raise ValueError("sampling_rate must be positive")

    @property
    def n_leads(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    def lead(self, name: str) -> np.ndarray:
        return self.samples[self.lead_names.index(name)]

    def __eq__(self, other):
        if not isinstance(other, EcgRecord):
            return NotImplemented
        return (self.lead_names == other.lead_names
                and self.record_id == other.record_id
                and np.float32(self.sampling_rate).tobytes() == np.float32(other.sampling_rate).tobytes()
                and self.samples.shape == other.samples.shape
                and self.samples.tobytes() == other.samples.tobytes())


def encode_record(r: EcgRecord) -> bytes:
    names = b""
    for name in r.lead_names:
        raw = name.encode("ascii")
        if len(raw) > _NAME_BYTES or raw != raw.strip():
            raise ValueError(f"lead name {name!r} does not fit the 8-byte field")
        names += raw.ljust(_NAME_BYTES, b" ")
    header = _HEADER.pack(RECORD_MAGIC, RECORD_VERSION, r.n_leads, r.n_samples, r.sampling_rate)
    return header + names + r.samples.astype("<f4").tobytes()


def decode_record(buf: bytes, record_id: str = "record") -> EcgRecord:
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError("file shorter than the record header")
    magic, version, n_leads, n_samples, fs = _HEADER.unpack_from(buf)
    if magic != RECORD_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {RECORD_MAGIC!r}")
    if version != RECORD_VERSION:
        raise VersionMismatchError(f"record version {version}, reader supports {RECORD_VERSION}")
    need = _HEADER.size + n_leads * _NAME_BYTES + 4 * n_leads * n_samples
    if len(buf) < need:
        raise TruncatedPayloadError(f"payload has {len(buf)} bytes, header promises {need}")
    off = _HEADER.size
    names = [buf[off + i * _NAME_BYTES: off + (i + 1) * _NAME_BYTES].decode("ascii").rstrip(" ")
             for i in range(n_leads)]
    off += n_leads * _NAME_BYTES
    samples = np.frombuffer(buf, dtype="<f4", count=n_leads * n_samples, offset=off)
    return EcgRecord(tuple(names), fs, samples.reshape(n_leads, n_samples), record_id)


def write_record(r: EcgRecord, path) -> None:
    Path(path).write_bytes(encode_record(r))


def read_record(path) -> EcgRecord:
    path = Path(path)
    return decode_record(path.read_bytes(), path.stem)


def import_csv(path, sampling_rate: float) -> EcgRecord:
    """Read a header-plus-numeric-body CSV; one column per lead."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise EmptyCsvError(f"{path}: empty file")
    header = [c.strip() for c in rows[0]]
    if len(rows) < 2:
        raise EmptyCsvError(f"{path}: header without data rows")
    values = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise RaggedRowError(f"{path}:{i}: {len(row)} cells, header has {len(header)}")
        for j, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise NonNumericCellError(f"{path}:{i}: cell {cell!r} is not numeric") from None
            if not math.isfinite(v):
                raise NonNumericCellError(f"{path}:{i}: cell {cell!r} is not finite")
            values[i - 2, j] = v
    return EcgRecord(tuple(header), sampling_rate, values.T, path.stem)


def write_labels_csv(path, record_ids, labels, names) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["record_id", *names])
        for rid, row in zip(record_ids, labels):
            w.writerow([rid, *(int(bool(v)) for v in row)])


def read_labels_csv(path):
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    ids = [r[0] for r in rows[1:]]
    y = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=bool).reshape(len(ids), len(names))
    return ids, y, names


# ---------------------------------------------------------------------------
# ICD-10 Chapter IX


class IcdError(ValueError):
    pass


class IcdParseError(IcdError):
    pass


class OutOfChapterError(IcdError):
    pass


class UnknownBlockError(IcdError):
    pass


CHAPTER_IX = "I00-I99"

# ICD-10-CM Chapter IX blocks, (first, last) category number inclusive
CHAPTER_IX_BLOCKS = (
    (0, 2), (5, 9), (10, 16), (20, 25), (26, 28),
    (30, 52), (60, 69), (70, 79), (80, 89), (95, 99),
)

_LEVELS = ("chapter", "block", "category", "subcategory")
_CODE_RE = re.compile(r"^([A-Z])(\d{2})([0-9A-Z]{0,4})$")
_RANGE_RE = re.compile(r"^([A-Z])(\d{2})-([A-Z])(\d{2})$")


@dataclass(frozen=True, eq=False)
class IcdCode:
    """A normalized code; compares and hashes like its code string."""

    code: str
    level: str = field(default="category")

    def __str__(self):
        return self.code

    def __eq__(self, other):
        if isinstance(other, IcdCode):
            return self.code == other.code and self.level == other.level
        if isinstance(other, str):
            return self.code == other
        return NotImplemented

    def __hash__(self):
        return hash(self.code)


def _block_name(lo: int, hi: int) -> str:
    return f"I{lo:02d}-I{hi:02d}"


def normalize_icd(raw: str) -> IcdCode:
    """Canonical dot-free uppercase form with its hierarchy level."""
    if not isinstance(raw, str) or not raw.strip():
        raise IcdParseError("empty ICD code")
    s = raw.strip().upper().replace(".", "")
    m = _RANGE_RE.match(s)
    if m:
        a, lo, b, hi = m.group(1), int(m.group(2)), m.group(3), int(m.group(4))
        if a != "I" or b != "I":
            raise OutOfChapterError(f"{raw!r} lies outside Chapter IX")
        if (lo, hi) == (0, 99):
            return IcdCode(CHAPTER_IX, "chapter")
        if (lo, hi) not in CHAPTER_IX_BLOCKS:
            raise UnknownBlockError(f"{raw!r} is not a Chapter IX block")
        return IcdCode(_block_name(lo, hi), "block")
    m = _CODE_RE.match(s)
    if not m:
        raise IcdParseError(f"malformed ICD code {raw!r}")
    if m.group(1) != "I":
        raise OutOfChapterError(f"{raw!r} lies outside Chapter IX")
    return IcdCode(s, "category" if len(s) == 3 else "subcategory")


def block_of(category: str) -> str:
    num = int(category[1:3])
    for lo, hi in CHAPTER_IX_BLOCKS:
        if lo <= num <= hi:
            return _block_name(lo, hi)
    raise UnknownBlockError(f"category {category} is not covered by any Chapter IX block")


def expand_icd(code) -> list:
    """Ancestors of ``code`` from chapter down to the code itself."""
    if not isinstance(code, IcdCode):
        code = normalize_icd(code)
    chapter = IcdCode(CHAPTER_IX, "chapter")
    if code.level == "chapter":
        return [chapter]
    if code.level == "block":
        return [chapter, code]
    cat = code.code[:3]
    out = [chapter, IcdCode(block_of(cat), "block"), IcdCode(cat, "category")]
    for n in range(4, len(code.code) + 1):
        out.append(IcdCode(code.code[:n], "subcategory"))
    return out


def covered_categories() -> list:
    return [f"I{n:02d}" for lo, hi in CHAPTER_IX_BLOCKS for n in range(lo, hi + 1)]
