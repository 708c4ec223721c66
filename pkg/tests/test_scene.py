"""Mask algebra against brute-force oracles."""

from collections import deque

import numpy as np
import pytest

from pychangen.errors import DimensionError, InstanceLookupError, ParameterError
from pychangen.scene import (
    ChangeMask,
    ContourMap,
    InstanceMap,
    SemanticMask,
    change_mask_of,
    connected_components,
    dilate,
    extract_contours,
    instance_support,
    instances_from_semantic,
    semantic_from_instances,
    union_of_supports,
)

NEIGHBORS_8 = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
NEIGHBORS_4 = [(-1, 0), (1, 0), (0, -1), (0, 1)]


def flood_fill_components(grid, neighbors):
    """Label 1-cells by BFS, numbering components in row-major discovery order."""
    h, w = grid.shape
    labels = np.zeros((h, w), dtype=np.int64)
    n = 0
    for y in range(h):
        for x in range(w):
            if grid[y, x] and not labels[y, x]:
                n += 1
                labels[y, x] = n
                queue = deque([(y, x)])
                while queue:
                    cy, cx = queue.popleft()
                    for dy, dx in neighbors:
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx < w and grid[ny, nx] and not labels[ny, nx]:
                            labels[ny, nx] = n
                            queue.append((ny, nx))
    return labels


def brute_dilate(grid, r):
    h, w = grid.shape
    out = np.zeros_like(grid)
    for y in range(h):
        for x in range(w):
            out[y, x] = grid[max(0, y - r):y + r + 1, max(0, x - r):x + r + 1].any()
    return out


def brute_contours(inst, neighbors):
    h, w = inst.shape
    out = np.zeros((h, w), dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            if inst[y, x] == 0:
                continue
            for dy, dx in neighbors:
                ny, nx = y + dy, x + dx
                if not (0 <= ny < h and 0 <= nx < w) or inst[ny, nx] != inst[y, x]:
                    out[y, x] = 1
                    break
    return out


class TestChangeMask:
    def test_identical_masks_have_no_change(self):
        mask = SemanticMask(np.random.default_rng(0).integers(0, 4, (16, 16)), 4)
        assert change_mask_of(mask, mask).count() == 0

    def test_single_cell_flip(self):
        before = SemanticMask(np.zeros((4, 4), dtype=int), 2)
        data = np.zeros((4, 4), dtype=int)
        data[2, 1] = 1
        change = change_mask_of(before, SemanticMask(data, 2))
        assert change.count() == 1
        assert change.data[2, 1] == 1

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            h, w = rng.integers(1, 33, size=2)
            a = rng.integers(0, 3, (h, w))
            b = rng.integers(0, 3, (h, w))
            expected = np.array([[int(a[y, x] != b[y, x]) for x in range(w)] for y in range(h)])
            got = change_mask_of(SemanticMask(a, 3), SemanticMask(b, 3))
            assert np.array_equal(got.data, expected)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            change_mask_of(SemanticMask(np.zeros((3, 3), int), 2),
                           SemanticMask(np.zeros((3, 4), int), 2))


class TestConnectedComponents:
    def test_diagonal_pixels(self):
        grid = np.array([[1, 0], [0, 1]], dtype=np.uint8)
        assert len(connected_components(grid, connectivity=8)) == 1
        assert len(connected_components(grid, connectivity=4)) == 2

    def test_empty_grid(self):
        comps = connected_components(np.zeros((5, 5), dtype=np.uint8))
        assert len(comps) == 0
        assert comps.ids == []

    @pytest.mark.parametrize("connectivity,neighbors", [(4, NEIGHBORS_4), (8, NEIGHBORS_8)])
    def test_matches_flood_fill(self, connectivity, neighbors):
        rng = np.random.default_rng(2 + connectivity)
        for _ in range(100):
            h, w = rng.integers(1, 33, size=2)
            grid = (rng.random((h, w)) < 0.45).astype(np.uint8)
            got = connected_components(grid, connectivity=connectivity)
            assert np.array_equal(got.data, flood_fill_components(grid, neighbors))

    def test_component_count_identity(self):
        # count = sum over components of 1, and supports partition the 1-cells
        rng = np.random.default_rng(3)
        grid = (rng.random((32, 32)) < 0.5).astype(np.uint8)
        comps = connected_components(grid)
        assert int((comps.data > 0).sum()) == int(grid.sum())
        assert comps.ids == list(range(1, len(comps) + 1))

    def test_rejects_bad_connectivity(self):
        with pytest.raises(ParameterError):
            connected_components(np.ones((2, 2), dtype=np.uint8), connectivity=6)


class TestInstancesFromSemantic:
    def test_touching_classes_stay_separate(self):
        data = np.array([[1, 1, 2, 2]])
        inst = instances_from_semantic(SemanticMask(data, 3))
        assert len(inst) == 2
        assert inst.classes == {1: 1, 2: 2}

    def test_round_trip_to_semantic(self, two_squares):
        mask, inst = two_squares
        assert semantic_from_instances(inst, 3).equals(mask)


class TestDilate:
    def test_radius_zero_is_identity(self):
        mask = ChangeMask((np.random.default_rng(4).random((9, 9)) < 0.2).astype(np.uint8))
        assert dilate(mask, 0).equals(mask)

    def test_single_pixel_radius_one(self):
        data = np.zeros((5, 5), dtype=np.uint8)
        data[2, 2] = 1
        grown = dilate(ChangeMask(data), 1)
        assert grown.count() == 9
        assert grown.data[1:4, 1:4].all()

    def test_clipped_at_border(self):
        data = np.zeros((4, 4), dtype=np.uint8)
        data[0, 0] = 1
        assert dilate(ChangeMask(data), 1).count() == 4

    def test_matches_window_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            h, w = rng.integers(1, 33, size=2)
            r = int(rng.integers(0, 4))
            grid = (rng.random((h, w)) < 0.1).astype(np.uint8)
            assert np.array_equal(dilate(ChangeMask(grid), r).data, brute_dilate(grid, r))

    def test_negative_radius(self):
        with pytest.raises(ParameterError):
            dilate(ChangeMask.zeros(3, 3), -1)


class TestExtractContours:
    def test_isolated_pixel(self):
        data = np.zeros((5, 5), dtype=np.int64)
        data[2, 2] = 1
        contour = extract_contours(InstanceMap(data, {1: 1}))
        assert contour.count() == 1

    def test_square_interior_excluded(self):
        data = np.zeros((7, 7), dtype=np.int64)
        data[1:6, 1:6] = 1
        contour = extract_contours(InstanceMap(data, {1: 1}))
        assert contour.count() == 16
        assert contour.data[2:5, 2:5].sum() == 0

    def test_image_border_counts_as_outside(self):
        inst = InstanceMap(np.ones((3, 3), dtype=np.int64), {1: 1})
        assert extract_contours(inst).count() == 8

    @pytest.mark.parametrize("connectivity,neighbors", [(4, NEIGHBORS_4), (8, NEIGHBORS_8)])
    def test_matches_neighbor_oracle(self, connectivity, neighbors):
        rng = np.random.default_rng(6 + connectivity)
        for _ in range(100):
            h, w = rng.integers(1, 33, size=2)
            inst = connected_components((rng.random((h, w)) < 0.5).astype(np.uint8))
            got = extract_contours(inst, connectivity=connectivity)
            assert np.array_equal(got.data, brute_contours(inst.data, neighbors))


class TestTypes:
    def test_semantic_mask_rejects_out_of_range(self):
        with pytest.raises(ParameterError):
            SemanticMask(np.array([[0, 3]]), 3)

    def test_instance_ids_must_match_classes(self):
        with pytest.raises(ParameterError):
            InstanceMap(np.array([[0, 1]]), {2: 1})

    def test_change_mask_binary(self):
        with pytest.raises(ParameterError):
            ChangeMask(np.array([[0, 2]]))

    def test_arrays_are_read_only(self):
        mask = SemanticMask(np.zeros((2, 2), dtype=int), 2)
        with pytest.raises(ValueError):
            mask.data[0, 0] = 1

    def test_one_hot(self):
        mask = SemanticMask(np.array([[0, 2], [1, 0]]), 3)
        hot = mask.one_hot()
        assert hot.shape == (3, 2, 2)
        assert hot.sum(axis=0).tolist() == [[1, 1], [1, 1]]
        assert hot[2, 0, 1] == 1

    def test_contour_raster(self):
        raster = ContourMap(np.eye(3, dtype=np.uint8)).to_raster()
        assert raster.shape == (1, 3, 3)
        assert raster.dtype == np.float32

    def test_instance_support_and_union(self, two_squares):
        _, inst = two_squares
        assert instance_support(inst, 2).sum() == 4
        assert union_of_supports(inst, [1, 3]).count() == 18
        assert union_of_supports(inst, []).count() == 0
        with pytest.raises(InstanceLookupError):
            instance_support(inst, 99)

    def test_without(self, two_squares):
        _, inst = two_squares
        left = inst.without([1])
        assert left.ids == [2, 3]
        assert not (left.data == 1).any()
