import warnings

import pytest
import torch

from adapters.errors import NoUsableImages, UndecodableImage
from adapters.imaging import list_images, load_corpus, load_image, write_sidecar

from .conftest import write_scene


def test_load_image_shape_and_range(tmp_path):
    path = write_scene(tmp_path / "a.png", seed=1)
    img = load_image(path, size=32)
    assert img.shape == (3, 32, 32)
    assert img.dtype == torch.float32
    assert 0.0 <= float(img.min()) and float(img.max()) <= 1.0


def test_load_image_native_size(tmp_path):
    path = write_scene(tmp_path / "a.png", seed=1, size=48)
    assert load_image(path, size=None).shape == (3, 48, 48)


def test_undecodable_raises(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"this is not a png")
    with pytest.raises(UndecodableImage):
        load_image(bad, size=32)


def test_list_images_sorted_and_filtered(tmp_path):
    write_scene(tmp_path / "b.png", seed=2)
    write_scene(tmp_path / "a.jpg", seed=3)
    (tmp_path / "notes.txt").write_text("ignored")
    assert [p.name for p in list_images(tmp_path)] == ["a.jpg", "b.png"]


def test_load_corpus_skip_bad(tmp_path):
    write_scene(tmp_path / "a.png", seed=4)
    (tmp_path / "broken.png").write_bytes(b"junk")
    with pytest.raises(UndecodableImage):
        load_corpus(tmp_path, size=32)
    with pytest.warns(UserWarning, match="broken.png"):
        ids, batch, skipped = load_corpus(tmp_path, size=32, skip_bad=True)
    assert ids == ["a"]
    assert batch.shape == (1, 3, 32, 32)
    assert len(skipped) == 1 and skipped[0].endswith("broken.png")


def test_empty_directory_rejected(tmp_path):
    with pytest.raises(NoUsableImages):
        load_corpus(tmp_path, size=32)


def test_sidecar_written_even_when_empty(tmp_path):
    side = write_sidecar(tmp_path / "emb.bin", [])
    assert side.name == "emb.bin.skipped.log"
    assert side.read_text() == ""
    side = write_sidecar(tmp_path / "emb2.bin", ["x.png", "y.png"])
    assert side.read_text() == "x.png\ny.png\n"


def test_decodable_corpus_loads_without_warnings(tmp_path):
    for i in range(3):
        write_scene(tmp_path / f"im{i}.png", seed=10 + i)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ids, batch, skipped = load_corpus(tmp_path, size=32, skip_bad=True)
    assert len(ids) == 3 and skipped == []
