import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from pepipe.dataset import (
    BoxLabel,
    Manifest,
    dataset_stats,
    load_classification,
    load_png_gray,
    parse_annotation,
    save_png_gray,
    split_dataset,
    write_annotation,
)
from pepipe.errors import (
    ConsistencyError,
    DecodeError,
    InputError,
    ParseError,
    UnsupportedFormatError,
    ValidationError,
)


def write_png(path, arr, mode=None):
    Image.fromarray(arr, mode=mode).save(path)
    return path


class TestLoadPng:
    def test_black_and_white(self, tmp_path):
        black = load_png_gray(write_png(tmp_path / "b.png", np.zeros((4, 5), np.uint8)))
        white = load_png_gray(write_png(tmp_path / "w.png", np.full((4, 5), 255, np.uint8)))
        assert black.shape == (4, 5, 1) and black.dtype == np.float32
        assert np.all(black == 0) and np.all(white == 1)

    def test_scaling(self, tmp_path):
        img = load_png_gray(write_png(tmp_path / "g.png", np.full((2, 2), 128, np.uint8)))
        assert img[0, 0, 0] == pytest.approx(128 / 255, abs=1e-7)
        assert img[0, 0, 0] == pytest.approx(0.50196, abs=1e-5)

    def test_rgb_channel_mean(self, tmp_path):
        rgb = np.zeros((2, 2, 3), np.uint8)
        rgb[..., 0], rgb[..., 1], rgb[..., 2] = 30, 60, 90
        img = load_png_gray(write_png(tmp_path / "c.png", rgb))
        np.testing.assert_allclose(img, 60 / 255, atol=1e-7)

    def test_16_bit_rejected(self, tmp_path):
        p = tmp_path / "deep.png"
        Image.fromarray(np.full((3, 3), 1000, np.uint16)).save(p)
        with pytest.raises(UnsupportedFormatError):
            load_png_gray(p)

    def test_corrupt(self, tmp_path):
        p = tmp_path / "bad.png"
        p.write_bytes(b"\x89PNG\r\n\x1a\n not really a png")
        with pytest.raises(DecodeError):
            load_png_gray(p)

    def test_missing(self, tmp_path):
        with pytest.raises(DecodeError):
            load_png_gray(tmp_path / "nope.png")

    def test_save_load_roundtrip(self, tmp_path):
        arr = np.random.default_rng(0).integers(0, 256, (6, 7)).astype(np.float32) / 255
        save_png_gray(tmp_path / "r.png", arr[..., None])
        np.testing.assert_array_equal(load_png_gray(tmp_path / "r.png")[..., 0], arr)


class TestAnnotation:
    def test_center_to_corners(self, tmp_path):
        p = tmp_path / "a.txt"
        p.write_text("0 0.5 0.5 0.2 0.1\n")
        (box,) = parse_annotation(p, 100, 100)
        np.testing.assert_allclose(box.to_pixels(100, 100), (40, 45, 60, 55), atol=1e-9)

    def test_empty(self, tmp_path):
        p = tmp_path / "e.txt"
        p.write_text("")
        assert parse_annotation(p, 64, 64) == []

    def test_out_of_range(self, tmp_path):
        p = tmp_path / "o.txt"
        p.write_text("0 1.5 0.5 0.2 0.1\n")
        with pytest.raises(ValidationError):
            parse_annotation(p, 64, 64)

    def test_malformed_line_number(self, tmp_path):
        p = tmp_path / "m.txt"
        p.write_text("0 0.5 0.5 0.2 0.1\n0 0.5 oops 0.2 0.1\n")
        with pytest.raises(ParseError) as info:
            parse_annotation(p, 64, 64)
        assert info.value.line == 2

    def test_wrong_field_count(self, tmp_path):
        p = tmp_path / "f.txt"
        p.write_text("0 0.5 0.5 0.2\n")
        with pytest.raises(ParseError):
            parse_annotation(p, 64, 64)

    def test_nonzero_class(self, tmp_path):
        p = tmp_path / "c.txt"
        p.write_text("1 0.5 0.5 0.2 0.1\n")
        with pytest.raises(ValidationError):
            parse_annotation(p, 64, 64)

    def test_write_empty(self, tmp_path):
        write_annotation([], tmp_path / "w.txt")
        assert (tmp_path / "w.txt").read_text() == ""

    def test_write_single(self, tmp_path):
        write_annotation([BoxLabel(0, 0.5, 0.5, 0.2, 0.1)], tmp_path / "w.txt")
        lines = (tmp_path / "w.txt").read_text().splitlines()
        assert len(lines) == 1 and len(lines[0].split()) == 5

    def test_eight_boxes_order(self, tmp_path):
        boxes = [BoxLabel(0, 0.1 * (i + 1), 0.5, 0.05, 0.05) for i in range(8)]
        write_annotation(boxes, tmp_path / "w.txt")
        back = parse_annotation(tmp_path / "w.txt", 64, 64)
        assert [b.cx for b in back] == pytest.approx([b.cx for b in boxes])


box_labels = st.builds(
    lambda cx, cy, w, h: BoxLabel(0, cx, cy, w, h),
    st.floats(0.3, 0.7), st.floats(0.3, 0.7), st.floats(0.01, 0.5), st.floats(0.01, 0.5),
)


@settings(max_examples=60, deadline=None)
@given(st.lists(box_labels, max_size=8))
def test_write_parse_identity(tmp_path_factory, boxes):
    p = tmp_path_factory.mktemp("rt") / "a.txt"
    write_annotation(boxes, p)
    back = parse_annotation(p, 64, 64)
    assert len(back) == len(boxes)
    for a, b in zip(back, boxes):
        for f in ("cx", "cy", "w", "h"):
            assert getattr(a, f) == pytest.approx(round(getattr(b, f), 6), abs=1e-12)


def make_class_tree(root, n_yes, n_no, boxes_per_yes=1):
    entries = []
    for lab, n in (("yes", n_yes), ("no", n_no)):
        (root / lab).mkdir(parents=True, exist_ok=True)
        for i in range(n):
            rel = f"{lab}/img_{i:03d}.png"
            save_png_gray(root / rel, np.zeros((8, 8, 1)))
            k = boxes_per_yes if lab == "yes" else 0
            write_annotation([BoxLabel(0, 0.5, 0.5, 0.25, 0.25)] * k, root / rel.replace(".png", ".txt"))
            entries.append(rel)
    return Manifest(root, entries, "all", 8)


class TestManifest:
    def test_duplicates_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            Manifest(tmp_path, ["a.png", "a.png"])

    def test_write_read(self, tmp_path):
        m = make_class_tree(tmp_path, 3, 2)
        m.write(tmp_path / "manifest.txt")
        back = Manifest.read(tmp_path / "manifest.txt")
        assert back.entries == m.entries and back.image_size == 8 and back.split == "all"
        assert back.checksum() == m.checksum()

    def test_validate_missing_file(self, tmp_path):
        m = make_class_tree(tmp_path, 1, 1)
        (tmp_path / m.entries[0]).unlink()
        with pytest.raises(ConsistencyError):
            m.validate()

    def test_load_classification(self, tmp_path):
        images, labels = load_classification(make_class_tree(tmp_path, 2, 3))
        assert images.shape == (5, 8, 8, 1)
        assert labels.tolist() == [0, 0, 1, 1, 1]


class TestSplit:
    def test_plain(self, tmp_path):
        m = Manifest(tmp_path, [f"x{i}.png" for i in range(10)])
        train, val = split_dataset(m, (0.8, 0.2), seed=1)
        assert len(train) == 8 and len(val) == 2
        assert not set(train.entries) & set(val.entries)
        assert set(train.entries) | set(val.entries) == set(m.entries)

    def test_stratified(self, tmp_path):
        m = Manifest(tmp_path, [f"yes/{i}.png" for i in range(50)] + [f"no/{i}.png" for i in range(50)])
        train, val = split_dataset(m, (0.8, 0.2), seed=3)
        assert train.labels().count("yes") == 40 and train.labels().count("no") == 40
        assert val.labels().count("yes") == 10 and val.labels().count("no") == 10
        assert train.split == "train" and val.split == "val"

    def test_deterministic(self, tmp_path):
        m = Manifest(tmp_path, [f"x{i}.png" for i in range(30)])
        assert split_dataset(m, (0.5, 0.5), 9) == split_dataset(m, (0.5, 0.5), 9)
        assert split_dataset(m, (0.5, 0.5), 9) != split_dataset(m, (0.5, 0.5), 10)

    def test_empty(self, tmp_path):
        with pytest.raises(InputError):
            split_dataset(Manifest(tmp_path, []), (0.8, 0.2), 0)

    def test_bad_fractions(self, tmp_path):
        with pytest.raises(InputError):
            split_dataset(Manifest(tmp_path, ["a.png"]), (0.8, 0.3), 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 60), st.floats(0.05, 0.95), st.integers(0, 99))
    def test_exhaustive_disjoint(self, n, frac, seed):
        m = Manifest("/tmp", [f"x{i}.png" for i in range(n)])
        a, b = split_dataset(m, (frac, 1 - frac), seed)
        assert sorted(a.entries + b.entries) == sorted(m.entries)


class TestStats:
    def test_two_boxes_each(self, tmp_path):
        s = dataset_stats(make_class_tree(tmp_path, 100, 0, boxes_per_yes=2))
        assert (s.mean_boxes_per_image, s.min_boxes, s.max_boxes) == (2.0, 2, 2)

    def test_held_out_fixture_mean(self, tmp_path):
        # 100 images carrying 226 boxes: 26 images with 3 boxes, 74 with 2
        m = make_class_tree(tmp_path, 100, 0, boxes_per_yes=2)
        for e in m.entries[:26]:
            write_annotation([BoxLabel(0, 0.5, 0.5, 0.25, 0.25)] * 3, m.annotation_path(e))
        s = dataset_stats(m)
        assert s.n_boxes == 226
        assert s.mean_boxes_per_image == pytest.approx(2.26)

    def test_empty(self, tmp_path):
        s = dataset_stats(Manifest(tmp_path, []))
        assert s.n_images == 0 and s.n_boxes == 0 and s.mean_boxes_per_image == 0

    def test_missing_sidecar(self, tmp_path):
        m = make_class_tree(tmp_path, 2, 0)
        m.annotation_path(m.entries[0]).unlink()
        with pytest.raises(ConsistencyError):
            dataset_stats(m)

    def test_kv_text(self, tmp_path):
        s = dataset_stats(make_class_tree(tmp_path, 2, 1))
        kv = dict(line.split("=") for line in s.kv_text().splitlines())
        assert kv["class.yes"] == "2" and kv["class.no"] == "1" and kv["n_boxes"] == "2"
