"""Two-tier ensemble selection and disagreement-based uncertainty.

Selection works on finished trial records: tier 1 takes every trial whose
validation MAE beats a hard threshold (ordered by MAE), tier 2 adds the
cheapest-to-train trials from the accuracy band just above it (ordered by
energy used). Prediction uncertainty is the population spread (divide by K,
not K-1) of the member predictions: per structure for energy, per component
then reduced for forces. Relative uncertainty rescales by the reference
spread of the dataset the members were trained on.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .container import GROUP_NAMES, read_manifest, read_record
from .errors import ConfigError, ValidationError
from .model import ModelParams, forward_batch, make_batch

log = logging.getLogger(__name__)

FORCE_REDUCTIONS = ("max", "mean", "l2")

# Reference per-atom energy spreads (Ha) for relative-uncertainty scaling.
DATASET_ENERGY_STD = {"ani1x": 6.48e-3}

PARITY_FIELDS = (
    "split",
    "source",
    "index",
    "n_atoms",
    "energy_true",
    "energy_mean",
    "energy_sigma",
    "force_sigma",
)
METRICS_FIELDS = ("split", "source", "count", "mae", "rmse")


# --------------------------------------------------------------------------
# Member selection
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SelectionPolicy:
    """Tier-1 MAE cut, tier-2 band edge, and tier-2 member count."""

    mae_threshold: float = 0.10
    band_threshold: float = 0.125
    band_size: int = 11

    def __post_init__(self):
        if not 0 < self.mae_threshold < self.band_threshold:
            raise ConfigError(
                "need 0 < mae_threshold < band_threshold, got "
                f"{self.mae_threshold} and {self.band_threshold}"
            )
        if self.band_size < 0:
            raise ConfigError(f"band_size must be >= 0, got {self.band_size}")


def select_ensemble(trials, policy: SelectionPolicy | None = None) -> list:
    """Pick members: sub-threshold trials by MAE, then the band by energy.

    Ties break by trial id; failed (non-finite MAE) trials never qualify.
    The result has len(tier1) + min(band_size, len(band)) members and the
    two tiers are disjoint by construction (strict < vs closed interval).
    """
    policy = policy or SelectionPolicy()
    finite = [t for t in trials if math.isfinite(t.mae)]
    tier1 = sorted(
        (t for t in finite if t.mae < policy.mae_threshold),
        key=lambda t: (t.mae, t.trial_id),
    )
    band = (
        t
        for t in finite
        if policy.mae_threshold <= t.mae <= policy.band_threshold
    )
    tier2 = sorted(band, key=lambda t: (t.energy_kwh, t.trial_id))
    return tier1 + tier2[: policy.band_size]


def pareto_front(trials) -> list:
    """Trials not dominated in the (MAE, energy) plane, both minimized.

    One ordered sweep: after sorting by (MAE, energy, id), a point survives
    iff its energy is strictly below everything already kept, or it repeats
    the frontier point exactly (equal points do not dominate each other).
    """
    pts = sorted(
        (t for t in trials if math.isfinite(t.mae)),
        key=lambda t: (t.mae, t.energy_kwh, t.trial_id),
    )
    front: list = []
    best_energy = math.inf
    for t in pts:
        if t.energy_kwh < best_energy:
            front.append(t)
            best_energy = t.energy_kwh
        elif (
            front
            and t.energy_kwh == front[-1].energy_kwh
            and t.mae == front[-1].mae
        ):
            front.append(t)
    return front


# --------------------------------------------------------------------------
# Ensemble prediction and uncertainty
# --------------------------------------------------------------------------


def population_sigma(stack: np.ndarray, axis: int = 0) -> np.ndarray:
    """Spread across members: sqrt(mean((x - mean)^2)), i.e. divide by K.

    Entries where every member agrees bitwise are exactly zero (a rounded
    mean must not manufacture disagreement).
    """
    arr = np.asarray(stack, dtype=np.float64)
    sigma = np.std(arr, axis=axis, ddof=0)
    spread = arr.max(axis=axis) - arr.min(axis=axis)
    return np.where(spread == 0.0, 0.0, sigma)


def reduce_force_sigma(
    sigma_comp: np.ndarray, node_offsets: np.ndarray, how: str = "max"
) -> np.ndarray:
    """Collapse per-component force spreads (n_total, 3) to one per graph."""
    if how not in FORCE_REDUCTIONS:
        raise ConfigError(f"force reduction must be one of {FORCE_REDUCTIONS}")
    out = np.zeros(len(node_offsets) - 1)
    for g in range(out.shape[0]):
        block = sigma_comp[node_offsets[g] : node_offsets[g + 1]]
        if how == "max":
            out[g] = block.max()
        elif how == "mean":
            out[g] = block.mean()
        else:
            out[g] = math.sqrt(float(np.mean(block**2)))
    return out


@dataclass
class EnsemblePrediction:
    energy_mean: np.ndarray  # (G,) total energies
    energy_sigma: np.ndarray  # (G,)
    force_sigma: np.ndarray  # (G,) reduced per structure
    member_count: int


def ensemble_predict(members, records, force_reduction: str = "max") -> EnsemblePrediction:
    """Mean and member-disagreement spread over a list of structures.

    ``members`` are checkpoints (``model_config`` + ``flat``); each runs its
    own forward pass on the same batch. A single member yields zero sigma.
    """
    members = list(members)
    if not members:
        raise ValidationError("ensemble needs at least one member")
    if force_reduction not in FORCE_REDUCTIONS:
        raise ConfigError(f"force reduction must be one of {FORCE_REDUCTIONS}")
    batch = make_batch(list(records))
    e_stack = np.zeros((len(members), batch.n_per_graph.shape[0]))
    f_stack = np.zeros((len(members),) + batch.forces_true.shape)
    for i, member in enumerate(members):
        params = ModelParams.from_flat(member.model_config, member.flat)
        e_pred, f_pred = forward_batch(params, batch)
        e_stack[i] = e_pred
        f_stack[i] = f_pred
    sigma_comp = population_sigma(f_stack)  # (n_total, 3)
    return EnsemblePrediction(
        energy_mean=e_stack.mean(axis=0),
        energy_sigma=population_sigma(e_stack),
        force_sigma=reduce_force_sigma(
            sigma_comp, batch.node_offsets, force_reduction
        ),
        member_count=len(members),
    )


def relative_uncertainty(sigma, dataset_sigma: float):
    """Spread in units of the dataset's own energy spread."""
    if not dataset_sigma > 0:
        raise ValidationError(
            f"dataset sigma must be > 0, got {dataset_sigma}"
        )
    return np.asarray(sigma, dtype=np.float64) / dataset_sigma


# --------------------------------------------------------------------------
# Parity rows and split metrics
# --------------------------------------------------------------------------


@dataclass
class ParityRow:
    """One structure: true vs ensemble-mean per-atom energy and spreads."""

    split: str
    source: str
    index: int
    n_atoms: int
    energy_true: float
    energy_mean: float
    energy_sigma: float
    force_sigma: float


@dataclass
class MetricsRow:
    split: str
    source: str
    count: int
    mae: float
    rmse: float


def split_metrics(rows, expected_splits=GROUP_NAMES) -> list[MetricsRow]:
    """Per (split, source) MAE and RMSE of the ensemble-mean energy."""
    groups: dict[tuple[str, str], list[ParityRow]] = {}
    for row in rows:
        groups.setdefault((row.split, row.source), []).append(row)
    for split in expected_splits:
        if not any(key[0] == split for key in groups):
            log.warning("split %s has no structures; omitted from metrics", split)
    out = []
    for (split, source) in sorted(groups):
        members = groups[(split, source)]
        resid = np.array([r.energy_mean - r.energy_true for r in members])
        out.append(
            MetricsRow(
                split=split,
                source=source,
                count=len(members),
                mae=float(np.mean(np.abs(resid))),
                rmse=float(np.sqrt(np.mean(resid**2))),
            )
        )
    return out


def build_parity_rows(
    container_path: str,
    members,
    sample: int | None = None,
    seed: int = 0,
    force_reduction: str = "max",
) -> list[ParityRow]:
    """Score sampled structures from every split against the ensemble.

    ``sample`` caps the number of structures drawn per split (uniform,
    without replacement, seeded); None scores everything. Energies are
    reported per atom.
    """
    manifest = read_manifest(container_path)
    rng = np.random.default_rng(seed)
    rows: list[ParityRow] = []
    for split in GROUP_NAMES:
        count = manifest.group(split).record_count
        if count == 0:
            continue
        if sample is not None and sample < count:
            indices = np.sort(rng.choice(count, size=sample, replace=False))
        else:
            indices = np.arange(count)
        records = [read_record(manifest, split, int(i), container_path)
                   for i in indices]
        pred = ensemble_predict(members, records, force_reduction)
        for j, (idx, rec) in enumerate(zip(indices, records)):
            n = rec.n_atoms
            rows.append(
                ParityRow(
                    split=split,
                    source=rec.source_tag,
                    index=int(idx),
                    n_atoms=n,
                    energy_true=rec.energy / n,
                    energy_mean=float(pred.energy_mean[j]) / n,
                    energy_sigma=float(pred.energy_sigma[j]) / n,
                    force_sigma=float(pred.force_sigma[j]),
                )
            )
    return rows


def write_parity_csv(path: str, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PARITY_FIELDS)
        for r in rows:
            writer.writerow(
                [r.split, r.source, r.index, r.n_atoms, repr(r.energy_true),
                 repr(r.energy_mean), repr(r.energy_sigma), repr(r.force_sigma)]
            )


def read_parity_csv(path: str) -> list[ParityRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != PARITY_FIELDS:
            raise ValidationError(f"unexpected parity CSV header {header}")
        return [
            ParityRow(row[0], row[1], int(row[2]), int(row[3]), float(row[4]),
                      float(row[5]), float(row[6]), float(row[7]))
            for row in reader
        ]


def write_metrics_csv(path: str, metrics) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_FIELDS)
        for m in metrics:
            writer.writerow(
                [m.split, m.source, m.count, repr(m.mae), repr(m.rmse)]
            )


def read_metrics_csv(path: str) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != METRICS_FIELDS:
            raise ValidationError(f"unexpected metrics CSV header {header}")
        return [
            MetricsRow(row[0], row[1], int(row[2]), float(row[3]), float(row[4]))
            for row in reader
        ]
