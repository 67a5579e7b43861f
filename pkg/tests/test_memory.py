"""Memory bank: refresh, confident selection, patch-filter labels."""

import numpy as np
import pytest

from frla import losses as L
from frla.errors import ShapeError, UsageError
from frla.memory import (MemoryBank, confident_mask, confident_subset, image_label_for_patch_filter,
                         refresh, write_bank)
from frla.models import target_forward_image
from frla.trainer import SGD
from frla.tensor import Tensor, backward


@pytest.fixture
def images(rng):
    return rng.uniform(0, 1, (11, 3, 16, 16))


class TestRefresh:
    def test_rows_equal_single_forward_pass(self, tiny_target, images):
        bank = refresh(None, tiny_target, images)
        for i in range(len(images)):
            np.testing.assert_array_equal(bank.probs[i], target_forward_image(tiny_target, images[i:i + 1]).data[0])

    def test_deterministic(self, tiny_target, images):
        a = refresh(None, tiny_target, images)
        b = refresh(a, tiny_target, images)
        np.testing.assert_array_equal(a.probs, b.probs)
        assert (a.epoch_stamp, b.epoch_stamp) == (0, 1)

    def test_changes_after_sgd_step(self, tiny_target, images):
        before = refresh(None, tiny_target, images)
        opt = SGD(tiny_target.parameters(), lr=0.1, momentum=0.9)
        p = target_forward_image(tiny_target, images)
        backward(L.loss_dis(p, np.eye(3)[np.arange(11) % 3]))
        opt.step()
        after = refresh(before, tiny_target, images)
        assert np.any(after.probs != before.probs)

    def test_rows_read_only(self, tiny_target, images):
        bank = refresh(None, tiny_target, images)
        with pytest.raises(ValueError):
            bank.probs[0, 0] = 1.0

    def test_size_mismatch(self, tiny_target, images):
        bank = refresh(None, tiny_target, images)
        with pytest.raises(ShapeError):
            refresh(bank, tiny_target, images[:5])

    def test_geometry_mismatch(self, tiny_target):
        with pytest.raises(ShapeError):
            refresh(None, tiny_target, np.zeros((2, 3, 8, 8)))

    def test_csv_dump(self, tmp_path, tiny_target, images):
        path = write_bank(refresh(None, tiny_target, images, epoch=3), tmp_path)
        assert path.name == "bank_epoch003.csv"
        assert len(path.read_text().splitlines()) == 12


class TestConfidentSubset:
    def test_threshold_example(self):
        bank = MemoryBank.from_probs([(0.96, 0.04), (0.94, 0.06)], 0)
        ids, rows = confident_subset(bank, [0, 1], 0.95)
        np.testing.assert_array_equal(ids, [0])
        np.testing.assert_array_equal(rows, [[0.96, 0.04]])

    def test_zero_threshold_selects_all(self):
        bank = MemoryBank.from_probs([(0.6, 0.4), (0.5, 0.5), (0.1, 0.9)], 0)
        ids, _ = confident_subset(bank, [2, 0, 1], 0.0)
        np.testing.assert_array_equal(ids, [2, 0, 1])

    def test_boundary_is_inclusive(self):
        bank = MemoryBank.from_probs([(0.95, 0.05), (0.05, 0.95)], 0)
        ids, _ = confident_subset(bank, [0, 1], 0.95)
        np.testing.assert_array_equal(ids, [0, 1])

    def test_preserves_batch_order(self, rng):
        probs = rng.dirichlet([0.2] * 3, size=30)
        bank = MemoryBank.from_probs(probs, 0)
        batch = rng.permutation(30)[:12]
        ids, rows = confident_subset(bank, batch, 0.7)
        np.testing.assert_array_equal(ids, [i for i in batch if probs[i].max() >= 0.7])
        np.testing.assert_array_equal(rows, probs[ids])

    def test_monotone_in_tau(self, rng):
        bank = MemoryBank.from_probs(rng.dirichlet([0.3] * 4, size=50), 0)
        sizes = [confident_subset(bank, np.arange(50), t)[0].size for t in np.linspace(0, 1, 11)]
        assert all(a >= b for a, b in zip(sizes, sizes[1:]))

    def test_unknown_id(self):
        bank = MemoryBank.from_probs([(0.5, 0.5)], 0)
        with pytest.raises(IndexError):
            confident_subset(bank, [1], 0.5)

    def test_bad_tau(self):
        bank = MemoryBank.from_probs([(0.5, 0.5)], 0)
        with pytest.raises(UsageError):
            confident_subset(bank, [0], 1.5)


class TestPatchFilterLabel:
    def test_examples(self):
        bank = MemoryBank.from_probs([(0.005, 0.005, 0.99), (0.5, 0.3, 0.2)], 0)
        assert image_label_for_patch_filter(bank, 0, 0.95) == 2
        assert image_label_for_patch_filter(bank, 1, 0.95) is None

    def test_consistent_with_subset(self, rng):
        bank = MemoryBank.from_probs(rng.dirichlet([0.3] * 3, size=40), 0)
        chosen = set(confident_subset(bank, np.arange(40), 0.8)[0].tolist())
        for i in range(40):
            label = image_label_for_patch_filter(bank, i, 0.8)
            assert (label is not None) == (i in chosen)
            if label is not None:
                assert label == int(np.argmax(bank.probs[i]))
        np.testing.assert_array_equal(confident_mask(bank, np.arange(40), 0.8),
                                      [i in chosen for i in range(40)])

    def test_unknown_id(self):
        with pytest.raises(IndexError):
            image_label_for_patch_filter(MemoryBank.from_probs([(0.5, 0.5)], 0), 3, 0.5)
