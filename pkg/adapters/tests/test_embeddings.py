import numpy as np
import pytest
import torch

from adapters.backbones import BACKBONES, build_backbone, extract_embeddings
from adapters.errors import MissingWeights

from qpp.io import load_embeddings

from .conftest import build_corpus, write_scene

# resnet18 keeps the format tests cheap; the GeM head is identical
FAST = dict(arch="resnet18", image_size=64)


def test_three_images_count_and_flag(tmp_path):
    corpus = build_corpus(tmp_path / "imgs", 3)
    out = extract_embeddings(corpus, tmp_path / "emb.bin", **FAST)
    store = load_embeddings(out)
    assert len(store) == 3
    assert store.normalized is True
    assert store.dim == 512
    assert list(store.ids) == ["img000", "img001", "img002"]


def test_norms_within_tolerance(tmp_path):
    corpus = build_corpus(tmp_path / "imgs", 5)
    store = load_embeddings(
        extract_embeddings(corpus, tmp_path / "emb.bin", **FAST)
    )
    norms = np.linalg.norm(store.vectors.astype(np.float64), axis=1)
    assert np.max(np.abs(norms - 1.0)) < 1e-5


def test_corrupt_image_skipped_with_warning_and_sidecar(tmp_path):
    corpus = build_corpus(tmp_path / "imgs", 2)
    (corpus / "broken.png").write_bytes(b"\x89PNG\r\n but hacked off")
    with pytest.warns(UserWarning, match="broken.png"):
        out = extract_embeddings(corpus, tmp_path / "emb.bin", **FAST)
    store = load_embeddings(out)
    assert len(store) == 2 and "broken" not in store.ids
    sidecar = out.parent / (out.name + ".skipped.log")
    assert sidecar.is_file()
    assert "broken.png" in sidecar.read_text()


def test_deterministic_across_runs(tmp_path):
    corpus = build_corpus(tmp_path / "imgs", 4)
    a = load_embeddings(extract_embeddings(corpus, tmp_path / "a.bin", **FAST))
    b = load_embeddings(extract_embeddings(corpus, tmp_path / "b.bin", **FAST))
    assert np.array_equal(a.vectors, b.vectors)
    assert list(a.ids) == list(b.ids)


def test_backbones_differ(tmp_path):
    """Both names build, and different seeds stand in for different weights."""
    corpus = build_corpus(tmp_path / "imgs", 2)
    outs = []
    for i, name in enumerate(BACKBONES):
        out = extract_embeddings(
            corpus, tmp_path / f"{name}.bin", backbone=name, seed=i, **FAST
        )
        outs.append(load_embeddings(out).vectors)
    assert not np.array_equal(outs[0], outs[1])


def test_checkpoint_overrides_seed_init(tmp_path):
    corpus = build_corpus(tmp_path / "imgs", 2)
    ckpt = tmp_path / "gem.pt"
    torch.save(build_backbone("gem_sfm", arch="resnet18", seed=3).state_dict(), ckpt)
    runs = [
        load_embeddings(
            extract_embeddings(
                corpus, tmp_path / f"{seed}.bin", weights=ckpt, seed=seed, **FAST
            )
        ).vectors
        for seed in (0, 1)
    ]
    assert np.array_equal(runs[0], runs[1])


def test_unknown_backbone_rejected(tmp_path):
    with pytest.raises(MissingWeights):
        build_backbone("gem_unknown")


def test_missing_weights_file_rejected(tmp_path):
    with pytest.raises(MissingWeights):
        build_backbone("gem_sfm", arch="resnet18", weights=tmp_path / "nope.pt")


def test_single_undecodable_corpus_rejected(tmp_path):
    corpus = tmp_path / "imgs"
    corpus.mkdir()
    (corpus / "only.png").write_bytes(b"junk")
    with pytest.warns(UserWarning):
        with pytest.raises(Exception):
            extract_embeddings(corpus, tmp_path / "emb.bin", **FAST)


def test_default_arch_dim(tmp_path):
    """The ResNet-101 trunk reports its native descriptor width."""
    model = build_backbone("gem_sfm")
    assert model.dim == 2048
    corpus = tmp_path / "imgs"
    corpus.mkdir()
    write_scene(corpus / "one.png", seed=7)
    out = extract_embeddings(corpus, tmp_path / "emb.bin", image_size=64)
    assert load_embeddings(out).dim == 2048
