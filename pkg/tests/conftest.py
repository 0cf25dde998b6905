import pytest

from attnlab import dataset as dsm
from attnlab.experiments import build_pipeline


@pytest.fixture(scope="session")
def cyclic_pipeline():
    """One solved cyclic benchmark instance (nonempty cyclic subdataset and a
    nonzero SVM solution) shared across read-only tests."""
    table = dsm.make_embeddings(6, 8, dsm.UNIT_SPHERE, seed=2)
    head = dsm.make_head(table, dsm.TIED)
    ds = dsm.gen_dataset(table, head, n=6, T=4, mode="cyclic", seed=2)
    return build_pipeline(ds)


@pytest.fixture(scope="session")
def acyclic_pipeline():
    table = dsm.make_embeddings(8, 8, dsm.UNIT_SPHERE, seed=5)
    head = dsm.make_head(table, dsm.TIED)
    ds = dsm.gen_dataset(table, head, n=4, T=6, mode="acyclic", seed=5)
    return build_pipeline(ds)
