import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import area_mean_downsample
from scanformer.errors import ConfigError, InputError
from scanformer.pyramid import (build_pyramid, child_table, children_of, parent_table, patch_coords,
                                patchify, patchify_batch, pyramid_batch, read_image, unpatchify,
                                write_image)


def test_paper_scale_pyramid_grids():
    pyr = build_pyramid(np.zeros((640, 640, 3), np.float32), 3, patch=32)
    assert [lvl.shape[0] for lvl in pyr.levels] == [160, 320, 640]
    grids = [patchify(lvl, 32).grid for lvl in pyr.levels]
    assert grids == [(5, 5), (10, 10), (20, 20)]
    assert [r * c for r, c in grids] == [25, 100, 400]


def test_desk_pyramid_sides():
    pyr = build_pyramid(np.zeros((64, 64, 3), np.float32), 3)
    assert [pyr.side(l) for l in range(3)] == [(16, 16), (32, 32), (64, 64)]


def test_finest_level_is_input():
    img = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
    pyr = build_pyramid(img, 3)
    np.testing.assert_array_equal(pyr.levels[-1], img)


def test_constant_image_stays_constant():
    pyr = build_pyramid(np.full((64, 64, 3), 0.3, np.float32), 3)
    for lvl in pyr.levels:
        np.testing.assert_array_equal(lvl, np.float32(0.3))


def test_downsampling_matches_block_average():
    img = np.random.default_rng(1).random((16, 16, 3)).astype(np.float32)
    pyr = build_pyramid(img, 2)
    np.testing.assert_allclose(pyr.levels[0], area_mean_downsample(img), atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([8, 16, 32]))
def test_mean_conserved_across_levels(seed, side):
    img = np.random.default_rng(seed).random((side, side, 3)).astype(np.float32)
    pyr = build_pyramid(img, 3)
    means = [lvl.astype(np.float64).mean() for lvl in pyr.levels]
    assert max(means) - min(means) <= 1e-6


def test_indivisible_sizes_rejected():
    with pytest.raises(ConfigError):
        build_pyramid(np.zeros((62, 62, 3)), 3)
    with pytest.raises(ConfigError):
        build_pyramid(np.zeros((64, 64, 3)), 3, patch=12)
    with pytest.raises(ConfigError):
        patchify(np.zeros((20, 20, 3)), 8)


def test_patch_coords_16_by_16():
    ps = patchify(np.zeros((16, 16, 3)), 8)
    np.testing.assert_allclose(ps.coords, [[0.25, 0.25, 0.5], [0.75, 0.25, 0.5],
                                           [0.25, 0.75, 0.5], [0.75, 0.75, 0.5]])


def test_paper_finest_scale_coordinate():
    coords = patch_coords(20, 20, 32, 640)
    np.testing.assert_allclose(coords[:, 2], 0.05)


def test_coords_strictly_inside_unit_cube():
    for rows, p, side in [(2, 8, 16), (8, 8, 64), (20, 32, 640)]:
        c = patch_coords(rows, rows, p, side)
        assert (c > 0).all() and (c < 1).all()


def test_patchify_roundtrip_and_order():
    img = np.random.default_rng(2).random((16, 24, 3)).astype(np.float32)
    ps = patchify(img, 8)
    assert ps.grid == (2, 3)
    np.testing.assert_array_equal(unpatchify(ps), img)
    # second patch in row-major order is the top-middle block
    np.testing.assert_array_equal(ps.flat[1], img[0:8, 8:16].reshape(-1))


def test_patchify_batch_agrees_with_single():
    imgs = np.random.default_rng(3).random((2, 16, 16, 3)).astype(np.float32)
    batch = patchify_batch(imgs, 4)
    for b in range(2):
        np.testing.assert_array_equal(batch[b], patchify(imgs[b], 4).flat)


def test_pyramid_batch_agrees_with_single():
    imgs = np.random.default_rng(4).random((2, 32, 32, 3)).astype(np.float32)
    levels = pyramid_batch(imgs, 3)
    for b in range(2):
        for got, want in zip(levels, build_pyramid(imgs[b], 3).levels):
            np.testing.assert_allclose(got[b], want, atol=1e-7)


def test_children_examples():
    assert children_of(0, (2, 2), (4, 4)) == [0, 1, 4, 5]
    assert children_of(3, (2, 2), (4, 4)) == [10, 11, 14, 15]


@pytest.mark.parametrize("grid", [(1, 1), (2, 2), (5, 5), (3, 4)])
def test_children_partition_finer_grid(grid):
    table = child_table(grid)
    assert sorted(table.reshape(-1).tolist()) == list(range(4 * grid[0] * grid[1]))
    parents = parent_table(grid)
    for p, kids in enumerate(table):
        assert (parents[kids] == p).all()


def test_children_cover_same_area():
    img = np.random.default_rng(5).random((32, 32, 3)).astype(np.float32)
    pyr = build_pyramid(img, 2, patch=8)
    coarse, fine = patchify(pyr.levels[0], 8), patchify(pyr.levels[1], 8)
    for p in range(len(coarse)):
        kids = children_of(p, coarse.grid, fine.grid)
        np.testing.assert_allclose(fine.coords[kids, :2].mean(axis=0), coarse.coords[p, :2])


def test_children_of_rejects_non_doubled_grid():
    with pytest.raises(ConfigError):
        children_of(0, (2, 2), (3, 3))


def test_image_file_roundtrip(tmp_path):
    img = np.random.default_rng(6).random((8, 6, 3)).astype(np.float32)
    write_image(tmp_path / "a.bin", img)
    raw = (tmp_path / "a.bin").read_bytes()
    assert raw[:12] == np.array([8, 6, 3], dtype="<u4").tobytes()
    assert len(raw) == 12 + img.size * 4
    np.testing.assert_array_equal(read_image(tmp_path / "a.bin"), img)


def test_truncated_image_file(tmp_path):
    img = np.zeros((4, 4, 3), np.float32)
    write_image(tmp_path / "a.bin", img)
    (tmp_path / "b.bin").write_bytes((tmp_path / "a.bin").read_bytes()[:-4])
    with pytest.raises(InputError):
        read_image(tmp_path / "b.bin")
