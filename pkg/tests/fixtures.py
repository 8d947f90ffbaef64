"""Hand-built datasets shared by several test modules."""

import numpy as np

from nocbench import encoder, losses
from nocbench.geo import DomainTag, PlanarPoint
from nocbench.store import Checkpoint, ImageRecord, Manifest

# q1 at (0, 0) whose best hit db0 is 10 m away; q2 at (1000, 0) whose best
# hit db1 is 1000 m away and whose second hit db2 is 5 m away
QUERY_XY = [(0.0, 0.0), (1000.0, 0.0)]
DB_XY = [(10.0, 0.0), (2000.0, 0.0), (995.0, 0.0)]
RANKINGS = [[0, 2, 1], [1, 2, 0]]


def recall_fixture(size=8, seed=0):
    """Images, manifests and a model realizing ``RANKINGS``.

    db0 and db1 are exact copies of the two query images; db2 is q2 plus a
    small perturbation, so q2 ranks db1 first and db2 second.
    """
    rng = np.random.default_rng(seed)
    a = rng.random((size, size, 3))
    b = rng.random((size, size, 3))
    b2 = np.clip(b + 0.01 * rng.standard_normal(b.shape), 0, 1)
    model = Checkpoint(encoder.init_params(4, 16, 8, seed=seed), losses.init_head(3, 8, seed=seed))
    q = Manifest("planar", [ImageRecord(f"q{i + 1}", f"q{i + 1}.npy", PlanarPoint(*xy), domain=DomainTag.NIGHT)
                            for i, xy in enumerate(QUERY_XY)])
    db = Manifest("planar", [ImageRecord(f"db{i}", f"db{i}.npy", PlanarPoint(*xy), label=i)
                             for i, xy in enumerate(DB_XY)])
    return {"model": model, "queries": q, "query_images": [a, b], "db": db, "db_images": [a, b, b2]}
