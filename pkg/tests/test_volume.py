import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from survseg.volume import (
    Mask3D,
    View,
    Volume3D,
    VolumeError,
    binary_components,
    connected_components,
    linear_index,
    longest_diameter,
    mask_outside,
    put_slice,
    remove_small_objects,
    slices,
    stack_slices,
    take_slice,
)


def _cube_mask(shape, corners_sides, label=2, spacing=(1.0, 1.0, 1.0)):
    data = np.zeros(shape, dtype=np.int32)
    for (x, y, z), s in corners_sides:
        data[x:x + s, y:y + s, z:z + s] = label
    return Mask3D(data, spacing)


def _brute_diameter(voxels, spacing):
    pts = np.asarray(voxels, float) * np.asarray(spacing)
    return max(np.linalg.norm(a - b) for a, b in itertools.combinations(pts, 2)) if len(pts) > 1 else 0.0


class TestVolume:
    def test_flat_layout_is_x_fastest(self):
        vol = Volume3D.from_flat(np.arange(24.0), (2, 3, 4))
        assert vol.data[1, 0, 0] == 1.0
        assert vol.data[0, 1, 0] == 2.0
        assert vol.data[0, 0, 1] == 6.0
        np.testing.assert_array_equal(vol.flat(), np.arange(24.0))

    def test_rejects_bad_inputs(self):
        with pytest.raises(VolumeError):
            Volume3D(np.full((2, 2, 2), np.nan))
        with pytest.raises(VolumeError):
            Volume3D(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
        with pytest.raises(VolumeError):
            Volume3D.from_flat(np.zeros(7), (2, 2, 2))
        with pytest.raises(VolumeError):
            Mask3D(np.full((2, 2, 2), -1))

    def test_immutable(self):
        vol = Volume3D(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            vol.data[0, 0, 0] = 1.0

    def test_view_axes(self):
        assert View.AXIAL.axis == 2 and View.SAGITTAL.axis == 0 and View.CORONAL.axis == 1
        assert View.parse("Sagittal") is View.SAGITTAL
        assert len(list(View)) == 3


class TestSlice:
    def test_single_voxel(self):
        vol = Volume3D(np.full((1, 1, 1), 7.0))
        for view in View:
            assert take_slice(vol, view, 0).item() == 7.0

    def test_constant_volume(self):
        vol = Volume3D(np.full((4, 4, 4), 3.5))
        plane = take_slice(vol, View.AXIAL, 2)
        assert plane.shape == (4, 4)
        assert np.all(plane == 3.5)

    def test_out_of_range(self):
        vol = Volume3D(np.zeros((2, 3, 4)))
        with pytest.raises(VolumeError):
            take_slice(vol, View.AXIAL, 4)
        with pytest.raises(VolumeError):
            take_slice(vol, View.SAGITTAL, -1)

    def test_put_slice_inverts_take(self):
        rng = np.random.default_rng(3)
        arr = rng.normal(size=(3, 4, 5))
        out = np.zeros_like(arr)
        for view in View:
            for k in range(arr.shape[view.axis]):
                put_slice(out, view, k, take_slice(arr, view, k))
            np.testing.assert_array_equal(out, arr)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, st.tuples(*[st.integers(1, 5)] * 3), elements=st.floats(-1e6, 1e6)))
    def test_restack_round_trip(self, arr):
        for view in View:
            back = stack_slices(slices(arr, view), view)
            assert back.tobytes() == np.ascontiguousarray(arr).tobytes()


class TestComponents:
    def test_empty(self):
        assert connected_components(Mask3D(np.zeros((3, 3, 3), int)), 2) == []

    def test_two_cubes(self):
        mask = _cube_mask((8, 8, 8), [((0, 0, 0), 2), ((5, 5, 5), 2)])
        comps = connected_components(mask, 2)
        assert len(comps) == 2
        assert [c.volume_mm3 for c in comps] == [8.0, 8.0]
        assert comps[0].bbox == ((0, 0, 0), (1, 1, 1))

    def test_single_voxel_spacing(self):
        data = np.zeros((3, 3, 3), int)
        data[1, 1, 1] = 2
        comps = connected_components(Mask3D(data, (2.0, 2.0, 2.0)), 2)
        assert len(comps) == 1 and comps[0].volume_mm3 == 8.0

    def test_unknown_label(self):
        with pytest.raises(VolumeError):
            connected_components(Mask3D(np.zeros((2, 2, 2), int), labels={1: "liver"}), 2)

    def test_connectivity(self):
        data = np.zeros((3, 3, 3), int)
        data[0, 0, 0] = data[1, 1, 1] = 2
        mask = Mask3D(data)
        assert len(connected_components(mask, 2, 26)) == 1
        assert len(connected_components(mask, 2, 6)) == 2
        with pytest.raises(VolumeError):
            connected_components(mask, 2, 18)

    def test_ordering_by_min_linear_index(self):
        data = np.zeros((6, 6, 6), int)
        data[4, 0, 0] = 2  # linear 4
        data[0, 0, 3] = 2  # linear 108
        data[0, 3, 0] = 2  # linear 18
        comps = connected_components(Mask3D(data), 2)
        firsts = [int(linear_index(c.voxels[0], (6, 6, 6))) for c in comps]
        assert firsts == [4, 18, 108]

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.bool_, st.tuples(*[st.integers(1, 6)] * 3)))
    def test_partition_and_determinism(self, binary):
        comps = binary_components(binary)
        cover = np.zeros(binary.shape, int)
        for c in comps:
            assert c.n_voxels > 0
            cover[tuple(c.voxels.T)] += 1
        assert np.array_equal(cover, binary.astype(int))
        # the same set read through a transposed-and-back array gives the same output
        again = binary_components(np.ascontiguousarray(binary.transpose(2, 1, 0)).transpose(2, 1, 0))
        assert len(again) == len(comps)
        for a, b in zip(comps, again):
            np.testing.assert_array_equal(a.voxels, b.voxels)


class TestDiameter:
    def test_single_voxel(self):
        assert longest_diameter(np.array([[1, 2, 3]])) == 0.0

    def test_adjacent_pair(self):
        assert longest_diameter(np.array([[0, 0, 0], [1, 0, 0]])) == 1.0

    def test_line_with_spacing(self):
        assert longest_diameter(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]]), (2.0, 1.0, 1.0)) == 4.0

    def test_empty(self):
        with pytest.raises(VolumeError):
            longest_diameter(np.zeros((0, 3), int))

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=40, unique=True),
        st.tuples(*[st.sampled_from([0.5, 1.0, 1.5, 2.0])] * 3),
    )
    def test_matches_brute_force(self, voxels, spacing):
        got = longest_diameter(np.array(voxels), spacing)
        assert got == pytest.approx(_brute_diameter(voxels, spacing), rel=1e-12, abs=1e-12)

    def test_filled_block_matches_brute_force(self):
        vox = np.argwhere(np.ones((5, 4, 3), bool))
        assert longest_diameter(vox, (1.0, 2.0, 0.5)) == pytest.approx(_brute_diameter(vox, (1.0, 2.0, 0.5)))

    @settings(max_examples=30, deadline=None)
    @given(
        st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5), st.integers(0, 5)), min_size=2, max_size=25, unique=True),
        st.permutations([0, 1, 2]),
    )
    def test_axis_relabeling(self, voxels, perm):
        spacing = np.array([0.7, 1.3, 2.1])
        v = np.array(voxels)
        a = longest_diameter(v, spacing)
        b = longest_diameter(v[:, perm], spacing[perm])
        assert a == pytest.approx(b, rel=1e-12)


class TestPostprocess:
    def test_threshold_zero_is_identity(self):
        mask = _cube_mask((8, 8, 8), [((0, 0, 0), 2), ((4, 4, 4), 3)])
        out = remove_small_objects(mask, 2, 0.0)
        np.testing.assert_array_equal(out.data, mask.data)

    def test_all_below_threshold(self):
        mask = _cube_mask((10, 10, 10), [((0, 0, 0), 2), ((5, 5, 5), 3)])
        assert not (remove_small_objects(mask, 2, 100.0).data == 2).any()

    def test_keeps_large(self):
        mask = _cube_mask((12, 12, 12), [((0, 0, 0), 2), ((5, 5, 5), 5)])
        out = remove_small_objects(mask, 2, 100.0)
        comps = connected_components(out, 2)
        assert [c.volume_mm3 for c in comps] == [125.0]

    def test_other_labels_untouched(self):
        data = np.zeros((6, 6, 6), int)
        data[0, 0, 0] = 1
        data[3, 3, 3] = 2
        out = remove_small_objects(Mask3D(data), 2, 10.0)
        assert out.data[0, 0, 0] == 1 and out.data[3, 3, 3] == 0

    def test_negative_threshold(self):
        with pytest.raises(VolumeError):
            remove_small_objects(Mask3D(np.zeros((2, 2, 2), int)), 2, -1.0)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.bool_, (6, 6, 6)), st.floats(0, 30))
    def test_idempotent(self, binary, thr):
        mask = Mask3D(binary.astype(int) * 2)
        once = remove_small_objects(mask, 2, thr)
        twice = remove_small_objects(once, 2, thr)
        np.testing.assert_array_equal(once.data, twice.data)
        for c in connected_components(once, 2):
            assert c.volume_mm3 >= thr

    def test_mask_outside_identity_and_annihilation(self):
        rng = np.random.default_rng(0)
        mask = Mask3D(rng.integers(0, 3, (4, 5, 6)))
        ones = Mask3D(np.ones((4, 5, 6), int))
        zeros = Mask3D(np.zeros((4, 5, 6), int))
        np.testing.assert_array_equal(mask_outside(mask, ones).data, mask.data)
        assert not mask_outside(mask, zeros).data.any()

    def test_mask_outside_straddling(self):
        tumor = np.zeros((8, 4, 4), int)
        tumor[2:6, 1:3, 1:3] = 2
        organ = np.zeros((8, 4, 4), int)
        organ[:4] = 1
        out = mask_outside(Mask3D(tumor), Mask3D(organ))
        assert out.data[2:4, 1:3, 1:3].all()
        assert not out.data[4:].any()

    def test_mask_outside_grid_mismatch(self):
        with pytest.raises(VolumeError):
            mask_outside(Mask3D(np.zeros((2, 2, 2), int)), Mask3D(np.zeros((2, 2, 3), int)))
        with pytest.raises(VolumeError):
            mask_outside(Mask3D(np.zeros((2, 2, 2), int)), Mask3D(np.zeros((2, 2, 2), int), (1.0, 1.0, 2.0)))
