import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from volseg.dataset import (
    AccessRecorder,
    RejectionSampler,
    SampleSource,
    TileSetMetadata,
    choose_source,
    draw_training_sample,
    enumerate_windows,
    load_tile_region,
    merge_pseudo_labeled,
    random_position,
    rejection_sample,
    split_dataset,
)
from volseg.errors import FormatError, InvalidArgumentError
from volseg.volume import BoundingBox, VoxelVolume, write_pgm, write_volume


def test_windows_even():
    assert len(enumerate_windows((1, 4, 4), (1, 2, 2), (1, 2, 2))) == 4


def test_windows_clamped():
    wins = enumerate_windows((1, 5, 4), (1, 2, 2), (1, 2, 2))
    assert len(wins) == 6
    assert {w.origin[1] for w in wins} == {0, 2, 3}


def test_windows_single():
    wins = enumerate_windows((3, 4, 5), (3, 4, 5), (1, 1, 1))
    assert [w.origin for w in wins] == [(0, 0, 0)]


def test_windows_z_major_order():
    wins = enumerate_windows((4, 4, 4), (2, 2, 2), (2, 2, 2))
    assert [w.origin for w in wins] == sorted(w.origin for w in wins)


def test_windows_too_large():
    with pytest.raises(InvalidArgumentError):
        enumerate_windows((1, 4, 4), (1, 5, 2), (1, 1, 1))


@pytest.mark.parametrize("shape,win,stride", [((5, 7, 9), (2, 3, 4), (1, 2, 3)), ((4, 6, 6), (2, 3, 3), (2, 3, 3))])
def test_windows_coverage(shape, win, stride):
    cover = np.zeros(shape, int)
    for w in enumerate_windows(shape, win, stride):
        cover[w.slices] += 1
    assert (cover >= 1).all()
    if stride == win and all(n % e == 0 for n, e in zip(shape, win)):
        assert (cover == 1).all()


def test_random_position_degenerate():
    for i in range(20):
        assert random_position(7, i, (2, 3, 4), (2, 3, 4)).origin == (0, 0, 0)


def test_random_position_deterministic():
    a = random_position(3, 99, (10, 20, 30), (2, 4, 4))
    b = random_position(3, 99, (10, 20, 30), (2, 4, 4))
    assert a == b


def test_random_position_thread_invariant():
    def draw(i):
        return random_position(11, i, (9, 9, 9), (2, 2, 2)).origin

    serial = [draw(i) for i in range(200)]
    with ThreadPoolExecutor(8) as pool:
        parallel = list(pool.map(draw, reversed(range(200))))
    assert serial == parallel[::-1]


def test_random_position_uniform():
    n = 100_000
    counts = np.zeros(11, int)
    for i in range(n):
        counts[random_position(0, i, (1, 1, 11), (1, 1, 1)).origin[2]] += 1
    rel = counts / (n / 11)
    assert np.all(np.abs(rel - 1) < 0.05), rel


def test_rejection_all_foreground_one_attempt():
    labels = np.ones((4, 8, 8), np.uint32)
    for i in range(200):
        assert rejection_sample(1, i, labels, (2, 4, 4), 0.95).attempts == 1


def test_rejection_geometric_mean():
    sampler = RejectionSampler(np.zeros((4, 8, 8), np.uint32), (2, 4, 4), 0.95, max_attempts=10_000)
    attempts = np.array([sampler.draw(5, i).attempts for i in range(100_000)])
    assert abs(attempts.mean() - 20) / 20 < 0.10
    # acceptance probability of a foreground-free draw is 1 - p
    assert abs(np.mean(attempts == 1) - 0.05) < 0.005


def test_rejection_zero_prob_is_random_position():
    labels = np.zeros((6, 9, 9), np.uint32)
    for i in range(100):
        d = rejection_sample(2, i, labels, (2, 3, 3), 0.0)
        assert d.attempts == 1
        assert d.position == random_position(2, i, labels.shape, (2, 3, 3))
        assert d.rng_stream_id == (2, i)


def test_rejection_exhaustion_falls_through():
    d = rejection_sample(0, 0, np.zeros((2, 2, 2), np.uint32), (1, 1, 1), 0.999999, max_attempts=3)
    assert d.attempts == 3


def test_rejection_min_foreground():
    labels = np.zeros((1, 1, 10), np.uint32)
    labels[0, 0, :2] = 1
    s = RejectionSampler(labels, (1, 1, 4), 0.9, min_foreground=2)
    counts = s.foreground_counts(np.array([[0, 0, 0], [0, 0, 1], [0, 0, 2]]))
    assert counts.tolist() == [2, 1, 0]


def test_rejection_bad_prob():
    with pytest.raises(InvalidArgumentError):
        RejectionSampler(np.zeros((2, 2, 2)), (1, 1, 1), 1.0)


def _tileset(tmp_path, sections=2, rows=2, cols=2, t=4, fmt="pgm"):
    rng = np.random.default_rng(0)
    full = rng.integers(0, 256, (sections, rows * t, cols * t), dtype=np.uint8)
    secs = []
    for z in range(sections):
        sec = []
        for r in range(rows):
            row = []
            for c in range(cols):
                tile = full[z, r * t:(r + 1) * t, c * t:(c + 1) * t]
                if fmt == "pgm":
                    name = f"t_{z}_{r}_{c}.pgm"
                    write_pgm(tmp_path / name, tile)
                else:
                    name = f"t_{z}_{r}_{c}"
                    write_volume(VoxelVolume(tile[None]), tmp_path / name)
                row.append(name)
            sec.append(row)
        secs.append(sec)
    meta_path = tmp_path / "tiles.json"
    meta_path.write_text(json.dumps({"sections": secs, "tile_extent": [t, t], "resolution_nm": [40, 4, 4],
                                     "dtype": "u8"}))
    return TileSetMetadata.from_json(meta_path), full


def test_tiles_single_tile_opened(tmp_path):
    meta, full = _tileset(tmp_path)
    rec = AccessRecorder()
    out = load_tile_region(meta, BoundingBox((0, 0, 0), (1, 4, 4)), rec)
    assert rec.count == 1
    assert np.array_equal(out.data, full[:1, :4, :4])


def test_tiles_four_tiles_match_monolithic(tmp_path):
    meta, full = _tileset(tmp_path)
    rec = AccessRecorder()
    box = BoundingBox((1, 2, 1), (1, 5, 6))
    out = load_tile_region(meta, box, rec)
    assert rec.count == 4
    assert np.array_equal(out.data, full[box.slices])
    assert out.resolution == (40.0, 4.0, 4.0)


def test_tiles_untouched_section_never_opened(tmp_path):
    meta, full = _tileset(tmp_path, sections=3)
    rec = AccessRecorder()
    load_tile_region(meta, BoundingBox((0, 0, 0), (2, 8, 8)), rec)
    assert not any("t_2_" in p for p in rec.paths)
    assert rec.count == 8


def test_tiles_raw_format(tmp_path):
    meta, full = _tileset(tmp_path, fmt="raw")
    out = load_tile_region(meta, BoundingBox((0, 3, 3), (2, 3, 3)))
    assert np.array_equal(out.data, full[0:2, 3:6, 3:6])


def test_tiles_open_count_equals_intersections(tmp_path):
    meta, full = _tileset(tmp_path, sections=3, rows=3, cols=2, t=4)
    rng = np.random.default_rng(1)
    for _ in range(30):
        ext = tuple(int(rng.integers(1, n + 1)) for n in full.shape)
        org = tuple(int(rng.integers(0, n - e + 1)) for n, e in zip(full.shape, ext))
        box = BoundingBox(org, ext)
        rec = AccessRecorder()
        out = load_tile_region(meta, box, rec)
        ry = (box.stop[1] - 1) // 4 - org[1] // 4 + 1
        rx = (box.stop[2] - 1) // 4 - org[2] // 4 + 1
        assert rec.count == ext[0] * ry * rx
        assert len(set(rec.paths)) == rec.count
        assert np.array_equal(out.data, full[box.slices])


def test_tiles_missing_file(tmp_path):
    meta, _ = _tileset(tmp_path)
    (tmp_path / "t_0_1_1.pgm").unlink()
    with pytest.raises(FileNotFoundError, match="t_0_1_1.pgm"):
        load_tile_region(meta, BoundingBox((0, 0, 0), (1, 8, 8)))


def test_tiles_shape_mismatch(tmp_path):
    meta, _ = _tileset(tmp_path)
    write_pgm(tmp_path / "t_0_0_0.pgm", np.zeros((3, 4), np.uint8))
    with pytest.raises(FormatError):
        load_tile_region(meta, BoundingBox((0, 0, 0), (1, 2, 2)))


def test_tiles_flat_sections_with_grid(tmp_path):
    meta, full = _tileset(tmp_path)
    nested = json.loads((tmp_path / "tiles.json").read_text())
    flat = {"sections": [[p for row in s for p in row] for s in nested["sections"]], "grid": [2, 2],
            "tile_extent": [4, 4], "dtype": "u8"}
    (tmp_path / "flat.json").write_text(json.dumps(flat))
    m2 = TileSetMetadata.from_json(tmp_path / "flat.json")
    assert m2.shape == (2, 8, 8)
    assert np.array_equal(load_tile_region(m2, BoundingBox((0, 0, 0), (2, 8, 8))).data, full)


@pytest.mark.parametrize("z,fractions,expected", [
    (100, (0.4, 0.1, 0.5), [(0, 40), (40, 50), (50, 100)]),
    (10, (1.0,), [(0, 10)]),
    (100, (0.05, 0.05, 0.9), [(0, 5), (5, 10), (10, 100)]),
])
def test_split_dataset(z, fractions, expected):
    split = split_dataset((z, 8, 8), fractions)
    assert [(b.origin[0], b.stop[0]) for b in split.boxes] == expected
    assert all(b.extent[1:] == (8, 8) for b in split.boxes)


def test_split_bad_sum():
    with pytest.raises(InvalidArgumentError):
        split_dataset((10, 1, 1), (0.5, 0.4))


def _vol(n, dtype=np.uint8, res=(1, 1, 1)):
    return VoxelVolume(np.zeros((1, 1, n), dtype), res)


def test_merge_pseudo_only_order():
    p = [(_vol(3), _vol(3, np.uint32)), (_vol(5), _vol(5, np.uint32))]
    merged = merge_pseudo_labeled([], p)
    assert [s.tag for s in merged] == ["pseudo", "pseudo"]
    assert [s.size for s in merged] == [3, 5]


def test_merge_size_weighted_sampling():
    merged = merge_pseudo_labeled([(_vol(100), _vol(100, np.uint32))], [(_vol(300), _vol(300, np.uint32))])
    picks = np.array([choose_source(4, i, merged) for i in range(100_000)])
    ratio = (picks == 1).sum() / (picks == 0).sum()
    assert abs(ratio / 3 - 1) < 0.05


def test_merge_dtype_mismatch():
    with pytest.raises(InvalidArgumentError):
        merge_pseudo_labeled([(_vol(3), None)], [(_vol(3, np.float32), None)])


def test_merge_resolution_mismatch():
    with pytest.raises(InvalidArgumentError):
        merge_pseudo_labeled([(_vol(3), None)], [(_vol(3, res=(40, 4, 4)), None)])


def test_training_sample_deterministic():
    rng = np.random.default_rng(0)
    img = VoxelVolume(rng.integers(0, 255, (6, 16, 16), dtype=np.uint8))
    lab = VoxelVolume((rng.random((6, 16, 16)) < 0.01).astype(np.uint32))
    sources = [SampleSource(img, lab)]
    a = draw_training_sample(9, 3, sources, (2, 8, 8), 0.9)
    b = draw_training_sample(9, 3, sources, (2, 8, 8), 0.9, samplers={})
    assert a.draw == b.draw
    assert np.array_equal(a.image, img.data[a.draw.position.slices])
    assert np.array_equal(a.label, lab.data[a.draw.position.slices])


def test_rejection_blocking_matches_single_pass():
    # oracle: generate all candidates at once and take the first accepted one
    from volseg.dataset import STREAM_POSITION, STREAM_REJECT, draw_rng

    labels = np.zeros((3, 20, 20), np.uint32)
    labels[1, 15:, 15:] = 1
    ext, p, m = np.array([1, 4, 4]), 0.97, 300
    sampler = RejectionSampler(labels, ext, p, max_attempts=m)
    span = np.array(labels.shape) - ext + 1
    for i in range(200):
        u = draw_rng(8, i, STREAM_POSITION).random((m, 3))
        coins = draw_rng(8, i, STREAM_REJECT).random(m)
        origins = np.minimum((u * span).astype(int), span - 1)
        k = m - 1
        for j, o in enumerate(origins):
            has_fg = labels[o[0]:o[0] + 1, o[1]:o[1] + 4, o[2]:o[2] + 4].any()
            if has_fg or coins[j] >= p:
                k = j
                break
        d = sampler.draw(8, i)
        assert d.attempts == k + 1
        assert d.position.origin == tuple(origins[k])
