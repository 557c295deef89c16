"""Shared fixtures and independent oracles used across the suite.

The brute-force assignment oracle lives here, not in the package, so the
package's solver is always checked against code it does not share.
"""

import itertools

import numpy as np
import pytest

from wbcx.core import (
    ATTRIBUTE_CARDINALITIES,
    BoundingBox,
    CellAnnotation,
    CellClass,
    ExplanationAttributes,
    MaskPair,
)
from wbcx.synthcell import GeneratorSpec, generate_dataset


def brute_force_assignment(costs):
    """Exhaustive minimum-cost injective assignment of M rows to N columns.

    Returns (sigma dict, total cost). Exponential; only for small fixtures.
    """
    costs = np.asarray(costs, dtype=np.float64)
    m, n = costs.shape
    best_total, best_sigma = np.inf, None
    for cols in itertools.permutations(range(n), m):
        total = sum(costs[i, j] for i, j in enumerate(cols))
        if total < best_total:
            best_total = total
            best_sigma = {i: j for i, j in enumerate(cols)}
    return best_sigma, float(best_total)


def random_annotation(rng, cls=None, mask_size=16):
    """Random but structurally valid ground-truth cell."""
    if cls is None:
        cls = CellClass(int(rng.integers(0, 10)))
    cyto = (rng.random((mask_size, mask_size)) > 0.6).astype(np.uint8)
    if cyto.sum() == 0:
        cyto[mask_size // 2, mask_size // 2] = 1
    nuc = ((rng.random((mask_size, mask_size)) > 0.6) & ~cyto.astype(bool)).astype(np.uint8)
    attrs = ExplanationAttributes.from_indices(
        [int(rng.integers(0, k)) for k in ATTRIBUTE_CARDINALITIES])
    box = BoundingBox(float(rng.uniform(0.35, 0.65)), float(rng.uniform(0.35, 0.65)),
                      float(rng.uniform(0.2, 0.5)), float(rng.uniform(0.2, 0.5)))
    return CellAnnotation(cell_class=cls, box=box,
                          masks=MaskPair(cytoplasm=cyto, nucleus=nuc), attributes=attrs)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Two images per class, 20 total; shared read-only across tests."""
    spec = GeneratorSpec(per_class_count={c: 2 for c in CellClass if c is not CellClass.EMPTY},
                         rng_seed=3)
    return generate_dataset(spec)


@pytest.fixture(scope="session")
def five_per_class_dataset():
    spec = GeneratorSpec(per_class_count={c: 5 for c in CellClass if c is not CellClass.EMPTY},
                         rng_seed=13)
    return generate_dataset(spec)
