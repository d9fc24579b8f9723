"""Config documents: one JSON object, seven sections, exhaustive validation.

``validate_config`` never stops at the first problem: it walks the whole
document and returns every issue, each tagged with the JSON-pointer path of
the offending value, together with a normalized document (defaults filled
in, numbers coerced to their declared type). Validating a normalized
document again yields the same document and no issues.
"""

from __future__ import annotations

from dataclasses import dataclass

from .ensemble import FORCE_REDUCTIONS
from .errors import SchemaError
from .model import MPNN_KINDS
from .train import OPTIMIZERS

SECTIONS = ("data", "store", "model", "train", "hpo", "telemetry", "selection")


@dataclass(frozen=True)
class FieldSpec:
    """Declared type, bounds, and default for one config key."""

    default: object
    kind: str  # int | float | str | bool
    lo: float | None = None  # inclusive
    hi: float | None = None  # inclusive
    gt: float | None = None  # exclusive
    choices: tuple | None = None
    nullable: bool = False


SCHEMA: dict[str, dict[str, FieldSpec]] = {
    "data": {
        "count": FieldSpec(1000, "int", lo=1),
        "seed": FieldSpec(0, "int"),
        "n_atoms_min": FieldSpec(4, "int", lo=1),
        "n_atoms_max": FieldSpec(12, "int", lo=1),
        "box_length": FieldSpec(6.0, "float", gt=0),
        "cutoff_radius": FieldSpec(2.0, "float", gt=0),
        "force_norm_limit": FieldSpec(100.0, "float", gt=0),
        "realign": FieldSpec(True, "bool"),
        "train_fraction": FieldSpec(0.8, "float", gt=0, hi=1),
        "val_fraction": FieldSpec(0.1, "float", gt=0, hi=1),
        "subfile_count": FieldSpec(8, "int", lo=1),
    },
    "store": {
        "replication_factor": FieldSpec(1, "int", lo=1),
        "fetch_timeout_s": FieldSpec(5.0, "float", gt=0),
    },
    "model": {
        "mpnn_kind": FieldSpec("mean-agg", "str", choices=MPNN_KINDS),
        "mpnn_layers": FieldSpec(3, "int", lo=1, hi=6),
        "mpnn_width": FieldSpec(100, "int", lo=100, hi=2000),
        "fc_layers": FieldSpec(2, "int", lo=2, hi=3),
        "fc_width": FieldSpec(300, "int", lo=300, hi=1000),
        "batch_size": FieldSpec(32, "int", lo=16, hi=128),
        "learning_rate": FieldSpec(1e-3, "float", gt=0),
        "alpha_energy": FieldSpec(1.0, "float", lo=0),
        "alpha_forces": FieldSpec(100.0, "float", lo=0),
    },
    "train": {
        "max_epochs": FieldSpec(30, "int", lo=0),
        "patience": FieldSpec(10, "int", lo=1),
        "base_seed": FieldSpec(0, "int"),
        "optimizer": FieldSpec("adam", "str", choices=OPTIMIZERS),
        "ranks": FieldSpec(1, "int", lo=1),
        "wall_clock_budget_s": FieldSpec(None, "float", gt=0, nullable=True),
    },
    "hpo": {
        "max_trials": FieldSpec(20, "int", lo=1),
        "n_workers": FieldSpec(2, "int", lo=1),
        "warmup": FieldSpec(8, "int", lo=1),
        "n_candidates": FieldSpec(256, "int", lo=1),
        "fidelity_epochs": FieldSpec(10, "int", lo=0),
        "seed": FieldSpec(0, "int"),
        "budget_s": FieldSpec(None, "float", gt=0, nullable=True),
    },
    "telemetry": {
        "sample_interval_s": FieldSpec(0.1, "float", gt=0),
    },
    "selection": {
        "mae_threshold": FieldSpec(0.10, "float", gt=0),
        "band_threshold": FieldSpec(0.125, "float", gt=0),
        "band_size": FieldSpec(11, "int", lo=0),
        "force_reduction": FieldSpec("max", "str", choices=FORCE_REDUCTIONS),
    },
}


@dataclass(frozen=True)
class ConfigIssue:
    pointer: str  # JSON pointer to the offending value
    message: str

    def __str__(self) -> str:
        return f"{self.pointer}: {self.message}"


def default_config() -> dict:
    return {
        section: {key: spec.default for key, spec in fields.items()}
        for section, fields in SCHEMA.items()
    }


def _check_value(value, spec: FieldSpec) -> str | None:
    """Return an error message, or None if the value is admissible."""
    if value is None:
        return None if spec.nullable else "must not be null"
    if spec.kind == "bool":
        if not isinstance(value, bool):
            return f"must be a boolean, got {type(value).__name__}"
        return None
    if isinstance(value, bool):  # bool passes isinstance(int) checks otherwise
        return f"must be a {spec.kind}, got a boolean"
    if spec.kind == "str":
        if not isinstance(value, str):
            return f"must be a string, got {type(value).__name__}"
        if spec.choices and value not in spec.choices:
            return f"must be one of {tuple(spec.choices)}, got {value!r}"
        return None
    if spec.kind == "int":
        if not isinstance(value, int):
            return f"must be an integer, got {type(value).__name__}"
        if spec.lo is not None and spec.hi is not None:
            if not spec.lo <= value <= spec.hi:
                return (
                    f"must be an integer in {{{int(spec.lo)}..{int(spec.hi)}}}, "
                    f"got {value}"
                )
        elif spec.lo is not None and value < spec.lo:
            return f"must be an integer >= {int(spec.lo)}, got {value}"
        return None
    # float: ints are accepted and coerced
    if not isinstance(value, (int, float)):
        return f"must be a number, got {type(value).__name__}"
    if spec.gt is not None and not value > spec.gt:
        return f"must be > {spec.gt}, got {value}"
    if spec.lo is not None and value < spec.lo:
        return f"must be >= {spec.lo}, got {value}"
    if spec.hi is not None and value > spec.hi:
        return f"must be <= {spec.hi}, got {value}"
    return None


def validate_config(doc) -> tuple[dict, list[ConfigIssue]]:
    """Normalize a (possibly partial) document, collecting every issue.

    Unknown sections and keys are errors; missing ones fall back to their
    defaults. The normalized document is complete and, when the issue list
    is empty, re-validates to itself.
    """
    issues: list[ConfigIssue] = []
    normalized = default_config()
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        issues.append(ConfigIssue("", "document must be a JSON object"))
        return normalized, issues

    for section in sorted(set(doc) - set(SCHEMA)):
        issues.append(
            ConfigIssue(
                f"/{section}",
                f"unknown section; expected one of {SECTIONS}",
            )
        )
    for section, fields in SCHEMA.items():
        given = doc.get(section)
        if given is None:
            continue
        if not isinstance(given, dict):
            issues.append(
                ConfigIssue(f"/{section}", "section must be a JSON object")
            )
            continue
        for key in sorted(set(given) - set(fields)):
            issues.append(
                ConfigIssue(
                    f"/{section}/{key}",
                    f"unknown key; expected one of {tuple(fields)}",
                )
            )
        for key, spec in fields.items():
            if key not in given:
                continue
            value = given[key]
            problem = _check_value(value, spec)
            if problem is not None:
                issues.append(ConfigIssue(f"/{section}/{key}", problem))
                continue
            if spec.kind == "float" and value is not None:
                value = float(value)
            normalized[section][key] = value

    _cross_checks(normalized, issues)
    return normalized, issues


def _cross_checks(normalized: dict, issues: list[ConfigIssue]) -> None:
    data = normalized["data"]
    if data["n_atoms_max"] < data["n_atoms_min"]:
        issues.append(
            ConfigIssue(
                "/data/n_atoms_max",
                f"must be >= n_atoms_min ({data['n_atoms_min']}), "
                f"got {data['n_atoms_max']}",
            )
        )
    if data["train_fraction"] + data["val_fraction"] >= 1.0:
        issues.append(
            ConfigIssue(
                "/data/val_fraction",
                "train_fraction + val_fraction must be < 1, got "
                f"{data['train_fraction']} + {data['val_fraction']}",
            )
        )
    selection = normalized["selection"]
    if selection["band_threshold"] <= selection["mae_threshold"]:
        issues.append(
            ConfigIssue(
                "/selection/band_threshold",
                f"must be > mae_threshold ({selection['mae_threshold']}), "
                f"got {selection['band_threshold']}",
            )
        )


def ensure_valid(doc) -> dict:
    """Normalize or raise one SchemaError carrying every issue."""
    normalized, issues = validate_config(doc)
    if issues:
        raise SchemaError(
            "invalid config:\n" + "\n".join(f"  {issue}" for issue in issues)
        )
    return normalized
