import numpy as np
import pytest

from wsireport.features import FeatureStore, PatchRef


def make_store(features, slide_id="s1", normalized=False):
    features = np.asarray(features, dtype=np.float64)
    coords = tuple(PatchRef(i, i * 224, 0) for i in range(features.shape[0]))
    return FeatureStore(slide_id, features, coords, normalized=normalized)


def random_unit_store(n, d, seed=0, slide_id="s1"):
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((n, d))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    return make_store(feats, slide_id=slide_id, normalized=True)


@pytest.fixture
def small_unit_store():
    return random_unit_store(20, 8, seed=3)
