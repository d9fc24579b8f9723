import numpy as np
import pytest

from gfmkit.records import GraphRecord


def make_random_record(rng: np.random.Generator, n_atoms=None, tag="synthetic") -> GraphRecord:
    """A structurally valid record with random contents (not physical)."""
    n = int(n_atoms if n_atoms is not None else rng.integers(1, 12))
    n_edges = int(rng.integers(0, max(1, n * (n - 1)) + 1)) if n > 1 else 0
    edges = (
        rng.integers(0, n, size=(n_edges, 2), dtype=np.uint32)
        if n_edges
        else np.zeros((0, 2), dtype=np.uint32)
    )
    return GraphRecord(
        atomic_numbers=rng.integers(1, 119, size=n, dtype=np.uint8),
        positions=rng.normal(size=(n, 3)),
        edge_index=edges,
        energy=float(rng.normal()),
        forces=rng.normal(size=(n, 3)),
        source_tag=tag,
    )


def make_random_records(seed: int, count: int, **kw) -> list[GraphRecord]:
    rng = np.random.default_rng(seed)
    return [make_random_record(rng, **kw) for _ in range(count)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
