"""Tests for the class table and class-to-group mapping."""
import numpy as np
import pytest

from modules.errors import InvalidInputError
from modules.phantom import generate, random_phantom_spec
from modules.taxonomy import DEFAULT_ENTRIES, GROUPS, ClassTaxonomy, TaxonomyEntry
from modules.volume import class_to_group


class TestClassToGroup:
    """Class IDs collapse into the five training groups."""

    @pytest.mark.parametrize("class_id,group_id", [(7, 3), (0, 0), (9, 4), (2, 1), (-1, -1), (3, 0)])
    def test_table_rows(self, make_mask, class_id, group_id):
        mask = make_mask(np.full((2, 3, 3), class_id))
        np.testing.assert_array_equal(class_to_group(mask).labels, group_id)

    def test_preserves_shape_and_metadata(self, make_mask):
        labels = np.arange(-1, 11).reshape(1, 3, 4)
        mask = make_mask(labels, annotator_id="a")
        groups = class_to_group(mask)
        assert groups.shape == mask.shape
        assert groups.annotator_id == "a"
        assert groups.labelled_slices == mask.labelled_slices

    def test_invalid_class_names_value_and_voxel(self, taxonomy):
        labels = np.zeros((2, 2, 2), dtype=np.int16)
        labels[1, 0, 1] = 11
        with pytest.raises(InvalidInputError, match=r"11 at voxel \(1, 0, 1\)"):
            taxonomy.groups_for(labels)


class TestTaxonomy:
    """Validation and derived prevalences."""

    def test_default_table(self, taxonomy):
        assert taxonomy.class_ids == list(range(-1, 11))
        assert taxonomy.group_ids == [0, 1, 2, 3, 4]
        assert taxonomy.entry(7).name.endswith("(Crazy Paving)")

    def test_group_prevalences_sum_class_prevalences(self, taxonomy):
        prevalences = taxonomy.group_prevalences()
        assert prevalences[0] == pytest.approx(0.94709 + 0.0002021 + 0.0000002)
        assert prevalences[4] == pytest.approx(0.0012062 + 0.0001665 + 0.0017524)
        assert sum(prevalences.values()) == pytest.approx(1.0, abs=1e-4)

    def test_wrong_group_rejected(self):
        entries = list(DEFAULT_ENTRIES)
        entries[8] = TaxonomyEntry(7, "Crazy Paving", 2, entries[8].prevalence)
        with pytest.raises(InvalidInputError, match="Class 7 must belong to group 3"):
            ClassTaxonomy(tuple(entries))

    def test_missing_class_rejected(self):
        with pytest.raises(InvalidInputError):
            ClassTaxonomy(DEFAULT_ENTRIES[:-1])

    def test_group_palette(self):
        assert GROUPS[1].colour == "Green"
        assert GROUPS[2].colour == "Red"
        assert GROUPS[3].colour == "Purple"
        assert GROUPS[4].colour == "Brown"

    def test_mask_group_frequencies_equal_summed_class_frequencies(self, taxonomy):
        _, truth = generate(random_phantom_spec(seed=3, shape=(4, 64, 64), n_blobs=3))
        labels = truth.labels.astype(np.int64)
        class_counts = np.bincount(labels.ravel() + 1, minlength=12)
        group_counts = np.bincount(class_to_group(truth).labels.astype(np.int64).ravel() + 1, minlength=6)
        for group in taxonomy.group_ids:
            members = [c for c in taxonomy.class_ids if taxonomy.group_of(c) == group]
            assert group_counts[group + 1] == sum(class_counts[c + 1] for c in members)
