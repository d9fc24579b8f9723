"""Graph records and their binary payload codec.

A :class:`GraphRecord` is one atomistic structure: element numbers, Cartesian
positions, a directed edge list, a scalar energy label and a per-atom force
tensor. The payload codec is the single source of truth for how a record is
laid out as bytes — the container sub-files, the in-memory store and the wire
protocol all move these exact payloads around, which is what makes
"bit-identical" checks meaningful end to end.

Payload layout (little-endian):

    u32 n_atoms | u32 edge_count | u32 tag_len
    atomic_numbers  n_atoms x u8
    positions       n_atoms x 3 f64
    edge_index      edge_count x 2 u32
    energy          f64
    forces          n_atoms x 3 f64
    source_tag      tag_len bytes (utf-8)
    u32 crc32 over all preceding bytes
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptionError, ValidationError

MAX_Z = 118

# fmt: off
ELEMENT_SYMBOLS = (
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne",
    "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr",
    "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn",
    "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd",
    "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb",
    "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg",
    "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th",
    "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm",
    "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds",
    "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og",
)
# fmt: on

SYMBOL_TO_Z = {sym: z for z, sym in enumerate(ELEMENT_SYMBOLS, start=1)}

_HEADER = struct.Struct("<III")
_CRC = struct.Struct("<I")
_ENERGY = struct.Struct("<d")


@dataclass
class GraphRecord:
    """One atomistic structure with energy/force labels.

    Arrays are coerced to fixed dtypes on construction so that encoding is
    deterministic: atomic_numbers uint8, positions/forces float64 (n, 3),
    edge_index uint32 (m, 2).
    """

    atomic_numbers: np.ndarray
    positions: np.ndarray
    edge_index: np.ndarray
    energy: float
    forces: np.ndarray
    source_tag: str = "synthetic"

    def __post_init__(self):
        self.atomic_numbers = np.ascontiguousarray(self.atomic_numbers, dtype=np.uint8)
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.edge_index = np.ascontiguousarray(self.edge_index, dtype=np.uint32).reshape(-1, 2)
        self.energy = float(self.energy)
        self.forces = np.ascontiguousarray(self.forces, dtype=np.float64).reshape(-1, 3)

    @property
    def n_atoms(self) -> int:
        return int(self.atomic_numbers.shape[0])

    @property
    def edge_count(self) -> int:
        return int(self.edge_index.shape[0])


def validate_record(record: GraphRecord, index: int | None = None) -> None:
    """Raise ValidationError if any structural invariant is broken.

    ``index`` is used to name the offending record in error messages.
    """
    where = "record" if index is None else f"record {index}"
    n = record.n_atoms
    if n < 1:
        raise ValidationError(f"{where}: n_atoms must be positive, got {n}")
    if record.positions.shape != (n, 3):
        raise ValidationError(
            f"{where}: positions shape {record.positions.shape} != ({n}, 3)"
        )
    if record.forces.shape != (n, 3):
        raise ValidationError(
            f"{where}: forces shape {record.forces.shape} != ({n}, 3)"
        )
    z = record.atomic_numbers
    if z.shape != (n,):
        raise ValidationError(f"{where}: atomic_numbers shape {z.shape} != ({n},)")
    if z.size and (z.min() < 1 or z.max() > MAX_Z):
        raise ValidationError(
            f"{where}: atomic numbers must lie in [1, {MAX_Z}], "
            f"got range [{z.min()}, {z.max()}]"
        )
    e = record.edge_index
    if e.ndim != 2 or e.shape[1] != 2:
        raise ValidationError(f"{where}: edge_index shape {e.shape} != (m, 2)")
    if e.size and e.max() >= n:
        raise ValidationError(
            f"{where}: edge endpoint {e.max()} out of range for {n} atoms"
        )


def encode_record(record: GraphRecord) -> bytes:
    """Serialize a record to its checksummed binary payload."""
    tag = record.source_tag.encode("utf-8")
    parts = [
        _HEADER.pack(record.n_atoms, record.edge_count, len(tag)),
        record.atomic_numbers.tobytes(),
        record.positions.astype("<f8", copy=False).tobytes(),
        record.edge_index.astype("<u4", copy=False).tobytes(),
        _ENERGY.pack(record.energy),
        record.forces.astype("<f8", copy=False).tobytes(),
        tag,
    ]
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def payload_size(n_atoms: int, edge_count: int, tag_len: int) -> int:
    """Byte length of an encoded record with the given dimensions."""
    return (
        _HEADER.size
        + n_atoms  # atomic numbers, u8
        + n_atoms * 3 * 8  # positions
        + edge_count * 2 * 4  # edge index
        + 8  # energy
        + n_atoms * 3 * 8  # forces
        + tag_len
        + _CRC.size
    )


def decode_record(payload: bytes) -> GraphRecord:
    """Inverse of :func:`encode_record`; verifies length and CRC32."""
    if len(payload) < _HEADER.size + _CRC.size:
        raise CorruptionError(f"record payload truncated ({len(payload)} bytes)")
    n_atoms, edge_count, tag_len = _HEADER.unpack_from(payload, 0)
    expected = payload_size(n_atoms, edge_count, tag_len)
    if len(payload) != expected:
        raise CorruptionError(
            f"record payload length {len(payload)} != expected {expected}"
        )
    (crc_stored,) = _CRC.unpack_from(payload, expected - _CRC.size)
    if zlib.crc32(payload[: -_CRC.size]) & 0xFFFFFFFF != crc_stored:
        raise CorruptionError("record payload checksum mismatch")

    off = _HEADER.size
    z = np.frombuffer(payload, dtype=np.uint8, count=n_atoms, offset=off).copy()
    off += n_atoms
    pos = np.frombuffer(payload, dtype="<f8", count=n_atoms * 3, offset=off)
    pos = pos.astype(np.float64).reshape(n_atoms, 3)
    off += n_atoms * 3 * 8
    edges = np.frombuffer(payload, dtype="<u4", count=edge_count * 2, offset=off)
    edges = edges.astype(np.uint32).reshape(edge_count, 2)
    off += edge_count * 2 * 4
    (energy,) = _ENERGY.unpack_from(payload, off)
    off += 8
    forces = np.frombuffer(payload, dtype="<f8", count=n_atoms * 3, offset=off)
    forces = forces.astype(np.float64).reshape(n_atoms, 3)
    off += n_atoms * 3 * 8
    tag = payload[off : off + tag_len].decode("utf-8")
    return GraphRecord(z, pos, edges, energy, forces, tag)


def records_equal(a: GraphRecord, b: GraphRecord) -> bool:
    """Bit-exact equality (NaN-safe: compares encoded bytes)."""
    return encode_record(a) == encode_record(b)
