"""Dataset construction and conditioning.

Synthetic generation with an analytically differentiable toy potential,
ingestion of small extended-XYZ files, spectral-norm force filtering,
per-element least-squares energy re-alignment, seeded splitting, and summary
histograms.

The toy potential is

    e = sum_i C*_{Z_i}  +  sum_{(i,j) in edges, i<j} (d_ij - d0)^2

with forces equal to its exact negative gradient, so both the linear
re-alignment fit and learned-force checks have closed-form ground truth.
"""

from __future__ import annotations

import logging
import math
import shlex
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ParseError, SchemaError, ValidationError
from .records import ELEMENT_SYMBOLS, MAX_Z, SYMBOL_TO_Z, GraphRecord

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Toy potential and synthetic generation
# --------------------------------------------------------------------------


def default_coefficients() -> np.ndarray:
    """Element-dependent default constants C*_Z = -0.1 * Z (eV/atom)."""
    return -0.1 * np.arange(1, MAX_Z + 1, dtype=np.float64)


@dataclass
class ToyPotential:
    """Per-element constant plus harmonic pair term with rest length d0."""

    coefficients: np.ndarray = field(default_factory=default_coefficients)
    d0: float = 1.0

    def __post_init__(self):
        coeff = np.zeros(MAX_Z, dtype=np.float64)
        if isinstance(self.coefficients, dict):
            for z, c in self.coefficients.items():
                coeff[int(z) - 1] = float(c)
        else:
            arr = np.asarray(self.coefficients, dtype=np.float64)
            if arr.shape != (MAX_Z,):
                raise ValidationError(
                    f"coefficients must have shape ({MAX_Z},), got {arr.shape}"
                )
            coeff = arr.copy()
        self.coefficients = coeff

    def energy(self, atomic_numbers, positions, edge_index) -> float:
        z = np.asarray(atomic_numbers, dtype=np.int64)
        e = float(self.coefficients[z - 1].sum())
        for i, j, d in _unique_pair_distances(positions, edge_index):
            e += (d - self.d0) ** 2
        return e

    def forces(self, atomic_numbers, positions, edge_index) -> np.ndarray:
        pos = np.asarray(positions, dtype=np.float64)
        f = np.zeros_like(pos)
        for i, j, d in _unique_pair_distances(pos, edge_index):
            if d < 1e-12:
                continue
            # d(e_pair)/d(x_i) = 2 (d - d0) (x_i - x_j) / d
            g = 2.0 * (d - self.d0) * (pos[i] - pos[j]) / d
            f[i] -= g
            f[j] += g
        return f


def _unique_pair_distances(positions, edge_index):
    pos = np.asarray(positions, dtype=np.float64)
    edges = np.asarray(edge_index, dtype=np.int64).reshape(-1, 2)
    for src, dst in edges:
        if src < dst:
            yield int(src), int(dst), float(np.linalg.norm(pos[src] - pos[dst]))


def build_cutoff_edges(positions, cutoff_radius: float) -> np.ndarray:
    """All ordered pairs (i, j), i != j, with |x_i - x_j| <= cutoff_radius.

    O(n^2) search; both directions of every pair are present, so edge sets
    are always symmetric.
    """
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    if n < 2:
        return np.zeros((0, 2), dtype=np.uint32)
    delta = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((delta**2).sum(axis=2))
    mask = dist <= cutoff_radius
    np.fill_diagonal(mask, False)
    return np.argwhere(mask).astype(np.uint32)


def generate_synthetic(
    count: int,
    n_atoms_range: tuple[int, int] = (4, 12),
    element_distribution: dict[int, float] | None = None,
    box_length: float = 6.0,
    cutoff_radius: float = 2.0,
    seed: int = 0,
    potential: ToyPotential | None = None,
    source_tag: str = "synthetic",
) -> list[GraphRecord]:
    """Deterministically generate labeled random structures.

    Atoms are placed uniformly in a cubic box; edges connect all pairs within
    the cutoff (both directions); labels come from ``potential`` (the default
    toy potential unless one is supplied), with forces its exact negative
    gradient.
    """
    if cutoff_radius <= 0:
        raise ValidationError(f"cutoff_radius must be > 0, got {cutoff_radius}")
    lo, hi = n_atoms_range
    if lo < 1 or hi < lo:
        raise ValidationError(f"invalid n_atoms_range {n_atoms_range}")
    if element_distribution is None:
        element_distribution = {1: 1.0, 6: 1.0, 8: 1.0}
    zs = np.array(sorted(element_distribution), dtype=np.int64)
    if zs.size == 0:
        raise ValidationError("element_distribution is empty")
    if zs.min() < 1 or zs.max() > MAX_Z:
        raise ValidationError("element numbers must lie in [1, 118]")
    weights = np.array([element_distribution[int(z)] for z in zs], dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise ValidationError("element_distribution has zero total weight")
    probs = weights / total
    potential = potential if potential is not None else ToyPotential()

    rng = np.random.default_rng(seed)
    records = []
    for _ in range(count):
        n = int(rng.integers(lo, hi + 1))
        z = zs[rng.choice(zs.size, size=n, p=probs)].astype(np.uint8)
        pos = rng.uniform(0.0, box_length, size=(n, 3))
        edges = build_cutoff_edges(pos, cutoff_radius)
        energy = potential.energy(z, pos, edges)
        forces = potential.forces(z, pos, edges)
        records.append(GraphRecord(z, pos, edges, energy, forces, source_tag))
    return records


# --------------------------------------------------------------------------
# Extended-XYZ ingestion / export
# --------------------------------------------------------------------------
#
# Frame = atom count line; comment line with key=value properties, at least
#   energy=<real> cutoff=<real> pbc="F F F"
# then per-atom lines: symbol x y z fx fy fz.


def export_extxyz(records: list[GraphRecord], path: str, cutoff_radius: float) -> None:
    """Write frames in the dialect above (12 significant digits)."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(f"{rec.n_atoms}\n")
            fh.write(
                f"energy={rec.energy:.12g} cutoff={cutoff_radius:.12g} "
                f'pbc="F F F" tag="{rec.source_tag}"\n'
            )
            for z, x, f in zip(rec.atomic_numbers, rec.positions, rec.forces):
                sym = ELEMENT_SYMBOLS[int(z) - 1]
                fh.write(
                    f"{sym} {x[0]:.12g} {x[1]:.12g} {x[2]:.12g} "
                    f"{f[0]:.12g} {f[1]:.12g} {f[2]:.12g}\n"
                )


def ingest_extxyz(path: str, default_tag: str | None = None) -> list[GraphRecord]:
    """Parse an extended-XYZ file into records, building edges by cutoff.

    The per-frame ``cutoff=`` property drives edge construction. Malformed
    frames raise ParseError with a line number; missing required properties
    raise SchemaError naming the frame.
    """
    with open(path) as fh:
        lines = fh.read().splitlines()
    if default_tag is None:
        base = path.rsplit("/", 1)[-1]
        default_tag = base.rsplit(".", 1)[0] if "." in base else base

    records = []
    lineno = 0
    frame = 0
    while lineno < len(lines):
        if not lines[lineno].strip():  # tolerate trailing blank lines
            lineno += 1
            continue
        try:
            n = int(lines[lineno].strip())
        except ValueError:
            raise ParseError(
                f"expected atom count, got {lines[lineno]!r}", line=lineno + 1
            )
        if n < 1:
            raise ParseError(f"atom count must be positive, got {n}", line=lineno + 1)
        if lineno + 1 + n >= len(lines) + 1 and lineno + 1 >= len(lines):
            raise ParseError("missing comment line", line=lineno + 2)
        props = _parse_properties(lines[lineno + 1], lineno + 2)
        if "energy" not in props:
            raise SchemaError(f"frame {frame}: missing required 'energy=' property")
        if "cutoff" not in props:
            raise SchemaError(f"frame {frame}: missing required 'cutoff=' property")
        try:
            energy = float(props["energy"])
            cutoff = float(props["cutoff"])
        except ValueError as exc:
            raise ParseError(f"bad numeric property: {exc}", line=lineno + 2)
        tag = props.get("tag", default_tag)

        if lineno + 2 + n > len(lines):
            raise ParseError(
                f"frame {frame}: expected {n} atom lines, file ends early",
                line=len(lines),
            )
        z = np.zeros(n, dtype=np.uint8)
        pos = np.zeros((n, 3))
        forces = np.zeros((n, 3))
        for a in range(n):
            raw = lines[lineno + 2 + a]
            fields = raw.split()
            if len(fields) < 7:
                raise SchemaError(
                    f"frame {frame}: atom line has {len(fields)} fields, "
                    f"need 7 (symbol x y z fx fy fz) at line {lineno + 3 + a}"
                )
            sym = fields[0]
            if sym not in SYMBOL_TO_Z:
                raise ParseError(
                    f"unknown element symbol {sym!r}", line=lineno + 3 + a
                )
            z[a] = SYMBOL_TO_Z[sym]
            try:
                vals = [float(v) for v in fields[1:7]]
            except ValueError:
                raise ParseError(f"non-numeric atom fields in {raw!r}", line=lineno + 3 + a)
            pos[a] = vals[:3]
            forces[a] = vals[3:]
        edges = build_cutoff_edges(pos, cutoff)
        records.append(GraphRecord(z, pos, edges, energy, forces, tag))
        lineno += 2 + n
        frame += 1
    return records


def _parse_properties(comment: str, lineno: int) -> dict[str, str]:
    try:
        tokens = shlex.split(comment)
    except ValueError as exc:
        raise ParseError(f"unbalanced quotes in comment: {exc}", line=lineno)
    props = {}
    for tok in tokens:
        if "=" in tok:
            key, _, value = tok.partition("=")
            props[key] = value
    return props


# --------------------------------------------------------------------------
# Filtering
# --------------------------------------------------------------------------


def force_spectral_norm(record: GraphRecord) -> float:
    """Largest singular value of the (n, 3) force tensor."""
    if record.forces.size == 0:
        return 0.0
    return float(np.linalg.norm(record.forces, ord=2))


def filter_by_force_norm(
    records: list[GraphRecord], threshold: float = 100.0
) -> tuple[list[GraphRecord], int]:
    """Drop records whose force-tensor spectral norm is strictly > threshold.

    A record sitting exactly at the threshold is kept. Order of survivors is
    preserved. Returns (kept, removed_count).
    """
    if threshold <= 0:
        raise ValidationError(f"threshold must be > 0, got {threshold}")
    kept = [r for r in records if force_spectral_norm(r) <= threshold]
    return kept, len(records) - len(kept)


# --------------------------------------------------------------------------
# Per-element energy re-alignment
# --------------------------------------------------------------------------


@dataclass
class ReferenceEnergyTable:
    """Least-squares per-element energy constants over all 118 elements.

    ``coefficients[z-1]`` is C_Z in eV/atom; elements absent from the fit get
    exactly 0. ``fit_residual_norm`` is the L2 norm of the post-fit residual.
    """

    coefficients: np.ndarray
    fit_residual_norm: float = 0.0

    def __post_init__(self):
        arr = np.asarray(self.coefficients, dtype=np.float64)
        if arr.shape != (MAX_Z,):
            raise ValidationError(
                f"coefficients must have shape ({MAX_Z},), got {arr.shape}"
            )
        if not np.isfinite(arr).all():
            raise ValidationError("coefficients must be finite")
        self.coefficients = arr


def composition_matrix(records: list[GraphRecord]) -> np.ndarray:
    """(N, 118) matrix of per-record element counts n_Z."""
    a = np.zeros((len(records), MAX_Z), dtype=np.float64)
    for i, rec in enumerate(records):
        np.add.at(a[i], rec.atomic_numbers.astype(np.int64) - 1, 1.0)
    return a


def fit_reference_energies(
    records: list[GraphRecord], damping: float = 1e-10
) -> ReferenceEnergyTable:
    """Solve min_C  sum_i (e_i - sum_Z C_Z n_Z^i)^2 by damped normal equations.

    The Tikhonov term ``damping`` on the diagonal makes the 118-column system
    nonsingular even though most elements never occur; absent elements are
    forced to exactly C_Z = 0 afterwards.
    """
    if not records:
        raise ValidationError("cannot fit reference energies on an empty record list")
    a = composition_matrix(records)
    e = np.array([rec.energy for rec in records], dtype=np.float64)
    m = a.T @ a + damping * np.eye(MAX_Z)
    coeff = np.linalg.solve(m, a.T @ e)
    coeff[a.sum(axis=0) == 0] = 0.0
    residual = e - a @ coeff
    return ReferenceEnergyTable(coeff, float(np.linalg.norm(residual)))


def fit_reference_energies_by_source(
    records: list[GraphRecord], damping: float = 1e-10
) -> dict[str, ReferenceEnergyTable]:
    """Fit one table per source_tag (sources are re-aligned independently)."""
    by_tag: dict[str, list[GraphRecord]] = {}
    for rec in records:
        by_tag.setdefault(rec.source_tag, []).append(rec)
    return {
        tag: fit_reference_energies(group, damping) for tag, group in by_tag.items()
    }


def realign_energies(
    records: list[GraphRecord],
    table: ReferenceEnergyTable | dict[str, ReferenceEnergyTable],
) -> list[GraphRecord]:
    """Return new records with e' = e - sum_Z C_Z n_Z; nothing else changes.

    ``table`` may be a single table or a per-source_tag mapping.
    """
    out = []
    for i, rec in enumerate(records):
        if isinstance(table, dict):
            if rec.source_tag not in table:
                raise ValidationError(
                    f"record {i}: no reference table for source {rec.source_tag!r}"
                )
            coeff = table[rec.source_tag].coefficients
        else:
            coeff = table.coefficients
        shift = float(coeff[rec.atomic_numbers.astype(np.int64) - 1].sum())
        out.append(replace(rec, energy=rec.energy - shift))
    return out


# --------------------------------------------------------------------------
# Splitting
# --------------------------------------------------------------------------

SPLIT_NAMES = ("trainset", "valset", "testset")


@dataclass
class SplitAssignment:
    """Seeded shuffle-then-cut split of N records into train/val/test.

    Sizes follow the floor rule: train = floor(r1*N), val = floor(r2*N),
    test = remainder. ``labels[i]`` names the group of original record i;
    ``order`` is the permutation that defines within-group ordering.
    """

    ratios: tuple[float, float, float]
    seed: int
    labels: np.ndarray  # (N,) int8: 0 train, 1 val, 2 test
    order: np.ndarray  # (N,) permutation of original indices

    def group_sizes(self) -> dict[str, int]:
        return {
            name: int((self.labels == k).sum()) for k, name in enumerate(SPLIT_NAMES)
        }

    def group_of(self, index: int) -> str:
        return SPLIT_NAMES[int(self.labels[index])]


def split_dataset(
    records_or_count,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> SplitAssignment:
    """Assign every record to exactly one of trainset/valset/testset."""
    n = (
        int(records_or_count)
        if isinstance(records_or_count, (int, np.integer))
        else len(records_or_count)
    )
    if n == 0:
        raise ValidationError("cannot split an empty dataset")
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValidationError(f"need three nonnegative ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-12:
        raise ValidationError(f"ratios must sum to 1, got sum {sum(ratios)!r}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = math.floor(ratios[0] * n)
    n_val = math.floor(ratios[1] * n)
    labels = np.full(n, 2, dtype=np.int8)
    labels[order[:n_train]] = 0
    labels[order[n_train : n_train + n_val]] = 1
    return SplitAssignment(tuple(ratios), seed, labels, order)


def split_records(
    records: list[GraphRecord], assignment: SplitAssignment
) -> dict[str, list[GraphRecord]]:
    """Materialize the three groups in shuffled (permutation) order."""
    if len(records) != assignment.labels.shape[0]:
        raise ValidationError(
            f"assignment covers {assignment.labels.shape[0]} records, got {len(records)}"
        )
    groups: dict[str, list[GraphRecord]] = {name: [] for name in SPLIT_NAMES}
    for idx in assignment.order:
        groups[assignment.group_of(int(idx))].append(records[int(idx)])
    return groups


# --------------------------------------------------------------------------
# Histograms and occurrence tables
# --------------------------------------------------------------------------

HISTOGRAM_FIELDS = (
    "atoms-per-graph",
    "edges-per-graph",
    "energy-per-atom",
    "force-l2-norm",
)


@dataclass
class HistogramSpec:
    field: str
    bin_edges: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        if self.field not in HISTOGRAM_FIELDS:
            raise ValidationError(
                f"unknown histogram field {self.field!r}; choose from {HISTOGRAM_FIELDS}"
            )
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        if edges.ndim != 1 or edges.size < 2 or not (np.diff(edges) > 0).all():
            raise ValidationError("bin_edges must be strictly increasing, length >= 2")
        self.bin_edges = edges


@dataclass
class HistogramResult:
    spec: HistogramSpec
    counts: np.ndarray
    out_of_range: float
    total: int


def _histogram_values(records: list[GraphRecord], field: str) -> np.ndarray:
    if field == "atoms-per-graph":
        return np.array([r.n_atoms for r in records], dtype=np.float64)
    if field == "edges-per-graph":
        return np.array([r.edge_count for r in records], dtype=np.float64)
    if field == "energy-per-atom":
        return np.array([r.energy / r.n_atoms for r in records], dtype=np.float64)
    return np.array([force_spectral_norm(r) for r in records], dtype=np.float64)


def compute_histograms(
    records: list[GraphRecord], spec: HistogramSpec
) -> HistogramResult:
    """Bin one scalar per record; values outside the bin range go to an
    overflow count reported separately. Normalized results (counts and
    overflow divided by N) sum to 1 within 1e-12."""
    values = _histogram_values(records, spec.field)
    edges = spec.bin_edges
    in_range = (values >= edges[0]) & (values <= edges[-1])
    counts, _ = np.histogram(values[in_range], bins=edges)
    out = values.size - int(in_range.sum())
    if spec.normalized:
        n = max(values.size, 1)
        return HistogramResult(spec, counts / n, out / n, values.size)
    return HistogramResult(spec, counts, out, values.size)


def element_occurrence(records: list[GraphRecord]) -> np.ndarray:
    """(118,) per-element atom counts across the whole dataset."""
    counts = np.zeros(MAX_Z, dtype=np.int64)
    for rec in records:
        np.add.at(counts, rec.atomic_numbers.astype(np.int64) - 1, 1)
    return counts
