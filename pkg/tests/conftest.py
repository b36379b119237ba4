"""Shared fixtures: taxonomy, seeded generators and small phantoms."""
import numpy as np
import pytest

from modules.phantom import BlobSpec, PhantomSpec, generate
from modules.taxonomy import ClassTaxonomy
from modules.volume import LabelMask


@pytest.fixture
def taxonomy():
    return ClassTaxonomy()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_spec():
    """PhantomSpec factory with one blob centred in the left lung."""

    def _make(shape=(4, 32, 32), group=2, radius=4.0, seed=0, noise_std_hu=15.0, **overrides):
        d, h, w = shape
        blob = BlobSpec(
            center=((d - 1) / 2, (h - 1) / 2, 0.72 * (w - 1)),
            radii=(100.0, radius, radius),
            group=group,
            intensity_hu={2: -520, 3: -380, 4: 40}[group],
        )
        return PhantomSpec(shape=shape, blobs=[blob], seed=seed, noise_std_hu=noise_std_hu, **overrides)

    return _make


@pytest.fixture
def phantom(make_spec):
    """(volume, truth) of a 4 x 32 x 32 phantom with one GGO blob."""
    return generate(make_spec())


@pytest.fixture
def make_mask(taxonomy):
    """LabelMask factory from a nested list or array."""

    def _make(labels, annotator_id="truth"):
        return LabelMask(labels=np.asarray(labels), annotator_id=annotator_id, taxonomy=taxonomy)

    return _make
