import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from reidaug.data import (ChannelStats, DataError, Dataset, PersonImage, channel_means, load_directory,
                          manifest_from_filenames, parse_filename, read_manifest, save_dataset,
                          split_query_gallery, synth_corpus, write_manifest)


def _img(value, h=2, w=2):
    return np.full((3, h, w), value, dtype=np.float32)


def _save_png(path, rgb):
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path)


@pytest.mark.parametrize("name, expected", [
    ("0002_c1s1_000451_01.jpg", (2, 1)),
    ("-1_c3s2_000000_00.jpg", (-1, 3)),
    ("1501_c6s4_001902_02.jpg", (1501, 6)),
    ("readme.jpg", None),
])
def test_parse_filename(name, expected):
    assert parse_filename(name) == expected


def test_load_directory_parses_names_and_reports(tmp_path):
    rgb = np.zeros((4, 2, 3), dtype=np.uint8)
    _save_png(tmp_path / "0002_c1s1_000451_01.png", rgb)
    _save_png(tmp_path / "-1_c3s2_000000_00.png", rgb + 7)
    _save_png(tmp_path / "oddname.png", rgb)
    (tmp_path / "0005_c2s1_000001_01.jpg").write_bytes(b"not an image")

    ds = load_directory(tmp_path, "gallery")
    labels = {s.origin_path: (s.identity, s.camera) for s in ds}
    assert labels == {"-1_c3s2_000000_00.png": (-1, 3), "0002_c1s1_000451_01.png": (2, 1)}
    assert ds.report.unparsed == ("oddname.png",)
    assert [e[0] for e in ds.report.errors] == ["0005_c2s1_000001_01.jpg"]
    assert ds.samples[0].pixels.shape == (3, 4, 2)
    assert ds.samples[0].pixels.max() == 7  # -1_... sorts first
    assert len(ds.without_junk()) == 1


def test_load_directory_errors(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_directory(tmp_path / "missing")
    with pytest.raises(DataError, match="no images found"):
        load_directory(tmp_path)


def test_manifest_takes_precedence(tmp_path):
    _save_png(tmp_path / "a.png", np.full((2, 2, 3), 10))
    _save_png(tmp_path / "b.png", np.full((2, 2, 3), 20))
    write_manifest(tmp_path / "manifest.tsv", [("b.png", 4, 0), ("a.png", 9, 2)])
    ds = load_directory(tmp_path)
    assert [(s.origin_path, s.identity, s.camera) for s in ds] == [("b.png", 4, 0), ("a.png", 9, 2)]


def test_manifest_round_trip(tmp_path):
    records = [("x/0001_c1_a.png", 1, 1), ("0002_c3_b.jpg", 2, 3), ("-1_c2_c.png", -1, 2)]
    write_manifest(tmp_path / "m.tsv", records)
    assert read_manifest(tmp_path / "m.tsv") == records
    write_manifest(tmp_path / "m2.tsv", read_manifest(tmp_path / "m.tsv"))
    assert (tmp_path / "m.tsv").read_bytes() == (tmp_path / "m2.tsv").read_bytes()


def test_filename_parsing_produces_manifest(tmp_path):
    for name in ("0001_c1_x.png", "0003_c2_y.png"):
        _save_png(tmp_path / name, np.zeros((2, 2, 3)))
    records, unparsed = manifest_from_filenames(tmp_path)
    assert records == [("0001_c1_x.png", 1, 1), ("0003_c2_y.png", 3, 2)] and unparsed == []


def test_save_then_load_preserves_labels_and_pixels(tmp_path):
    ds = synth_corpus(3, 2, 16, 8, seed=1)
    save_dataset(ds, tmp_path)
    back = load_directory(tmp_path)
    assert [(s.identity, s.camera) for s in back] == [(s.identity, s.camera) for s in ds]
    np.testing.assert_allclose(back.samples[0].pixels, np.rint(ds.samples[0].pixels))


def test_person_image_validation():
    with pytest.raises(ValueError):
        PersonImage(np.zeros((1, 2, 2)), 0, 0)
    with pytest.raises(ValueError):
        PersonImage(_img(300), 0, 0)
    with pytest.raises(ValueError):
        PersonImage(_img(np.nan), 0, 0)
    with pytest.raises(ValueError):
        PersonImage(_img(0), -2, 0)
    s = PersonImage(_img(1), 0, 0)
    assert not s.pixels.flags.writeable


def test_channel_means_examples():
    zeros = Dataset([PersonImage(_img(0), 0, 0), PersonImage(_img(0), 1, 0)])
    assert channel_means(zeros).fill == (0.0, 0.0, 0.0)

    a = np.zeros((3, 1, 1), dtype=np.float32)
    b = np.zeros((3, 1, 1), dtype=np.float32)
    a[0], b[0] = 10, 30
    stats = channel_means(Dataset([PersonImage(a, 0, 0), PersonImage(b, 0, 0)]))
    assert stats.mean_r == 20 and stats.count == 2

    with pytest.raises(ValueError):
        channel_means(Dataset([]))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**16))
def test_channel_means_combine_weighted(n1, n2, seed):
    rng = np.random.default_rng(seed)

    def make(n):
        h, w = rng.integers(1, 5, 2)
        return [PersonImage(rng.uniform(0, 255, (3, h, w)).astype(np.float32), 0, 0) for _ in range(n)]

    a, b = make(n1), make(n2)
    both = channel_means(a + b)
    combined = channel_means(a).combine(channel_means(b))
    np.testing.assert_allclose(both.fill, combined.fill, rtol=1e-6)
    assert both.count == combined.count


def test_channel_stats_bounds():
    with pytest.raises(ValueError):
        ChannelStats(300, 0, 0, 1)
    with pytest.raises(ValueError):
        ChannelStats(1, 1, 1, 0)


def test_synth_corpus_counts_and_determinism():
    ds = synth_corpus(16, 8, 32, 16, seed=7)
    assert len(ds) == 128 and len(set(ds.identities.tolist())) == 16
    again = synth_corpus(16, 8, 32, 16, seed=7)
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(ds, again))

    single = synth_corpus(1, 1, 32, 16, seed=0)
    assert len(single) == 1


def test_synth_corpus_seeds_change_pixels_not_labels():
    a, b = synth_corpus(4, 3, 16, 8, seed=1), synth_corpus(4, 3, 16, 8, seed=2)
    assert [(s.identity, s.camera) for s in a] == [(s.identity, s.camera) for s in b]
    assert not np.array_equal(a.stack(), b.stack())


@pytest.mark.parametrize("args", [(0, 1, 16, 8), (1, 0, 16, 8), (1, 1, 7, 8), (1, 1, 8, 4)])
def test_synth_corpus_rejects_bad_sizes(args):
    with pytest.raises(ValueError):
        synth_corpus(*args)


def test_split_query_gallery():
    ds = synth_corpus(3, 5, 16, 8, seed=0)
    q, g = split_query_gallery(ds, 2)
    assert len(q) == 6 and len(g) == 9 and q.split == "query" and g.split == "gallery"
