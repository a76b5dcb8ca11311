import json
from collections import Counter

import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import silhouette_score

from heteroseg.errors import EmbeddingError
from heteroseg.embedding_viz import (
    EmbeddingMeta,
    FeatureSample,
    compute_tsne,
    default_masks,
    extract_features,
    mask_separability,
    render_scatter,
    visualize,
    write_embedding,
)
from heteroseg.missingness import ModalityMask
from heteroseg.nets import NetworkKind, build_model


def fake_samples(n, mask_names=("All",), width=3, seed=0):
    rng = np.random.default_rng(seed)
    return [
        FeatureSample(
            feature=rng.normal(size=width),
            predicted_label=int(rng.choice([0, 1, 2, 4])),
            true_label=0,
            mask_name=mask_names[i % len(mask_names)],
            voxel_id=("s", i, 0, 0),
        )
        for i in range(n)
    ]


class TestExtract:
    def test_same_voxels_under_every_mask(self, phantoms, tiny_network):
        config = tiny_network(NetworkKind.MULTIPATH_SHAREDREP)
        model = build_model(config, seed=0)
        masks = default_masks(4)
        samples = extract_features(model, phantoms[:2], np.random.default_rng(0), 2, 50, masks, 20, 2)
        assert len(samples) == 50
        counts = Counter(s.mask_name for s in samples)
        assert counts == {"All": 10, "T1W": 10, "T1WC": 10, "T2W": 10, "FLAIR": 10}
        by_mask = {name: Counter(s.voxel_id for s in samples if s.mask_name == name) for name in counts}
        assert all(ids == by_mask["All"] for ids in by_mask.values())
        assert all(s.feature.shape == (config.hidden_width,) for s in samples)
        assert {s.true_label for s in samples} <= {0, 1, 2, 4}

    def test_masks_change_features(self, phantoms, tiny_network):
        model = build_model(tiny_network(NetworkKind.MULTIPATH_CONCAT), seed=0)
        masks = [ModalityMask.full(4), ModalityMask(present=(False, False, False, True))]
        samples = extract_features(model, phantoms[:1], np.random.default_rng(1), 1, 20, masks, 20, 2)
        full = np.stack([s.feature for s in samples[:10]])
        flair = np.stack([s.feature for s in samples[10:]])
        assert not np.allclose(full, flair)

    def test_voxels_must_split_over_masks(self, phantoms, tiny_network):
        model = build_model(tiny_network(), seed=0)
        with pytest.raises(EmbeddingError, match="evenly"):
            extract_features(model, phantoms[:1], np.random.default_rng(0), 1, 11, default_masks(4), 20, 2)

    def test_not_enough_voxels(self, phantoms, tiny_network):
        model = build_model(tiny_network(), seed=0)
        # one 20^3 patch holds 4^3 = 64 target voxels
        with pytest.raises(EmbeddingError, match="only 64"):
            extract_features(model, phantoms[:1], np.random.default_rng(0), 1, 65, [ModalityMask.full(4)], 20, 2)

    def test_arity_mismatch(self, phantoms, tiny_network):
        model = build_model(tiny_network(num_modalities=2), seed=0)
        with pytest.raises(EmbeddingError, match="2 inputs"):
            extract_features(model, phantoms[:1], np.random.default_rng(0), 1, 5, [ModalityMask.full(4)], 20, 2)

    def test_no_masks(self, phantoms, tiny_network):
        with pytest.raises(EmbeddingError):
            extract_features(build_model(tiny_network()), phantoms[:1], np.random.default_rng(0), 1, 5, [], 20, 2)

    def test_default_masks(self):
        assert [m.present for m in default_masks(2)] == [(True, True), (True, False), (False, True)]
        assert len(default_masks(1)) == 1


class TestTSNE:
    def test_shape_and_determinism(self):
        features = np.random.default_rng(0).normal(size=(1000, 64))
        a = compute_tsne(features, perplexity=30, seed=0, iterations=250)
        assert a.shape == (1000, 2)
        assert np.all(np.isfinite(a))
        np.testing.assert_array_equal(a, compute_tsne(features, perplexity=30, seed=0, iterations=250))

    def test_separated_clusters_stay_separated(self):
        rng = np.random.default_rng(0)
        features = np.concatenate([rng.normal(0, 1, (60, 10)), rng.normal(10, 1, (60, 10))])
        points = compute_tsne(features, perplexity=10, seed=0, iterations=500)
        assert silhouette_score(points, [0] * 60 + [1] * 60) > 0.5

    def test_accepts_samples(self):
        assert compute_tsne(fake_samples(40), perplexity=5, seed=0, iterations=250).shape == (40, 2)

    def test_too_few_samples(self):
        with pytest.raises(EmbeddingError, match="at least 90"):
            compute_tsne(np.random.default_rng(0).normal(size=(50, 4)), perplexity=30)

    def test_identical_features(self):
        with pytest.raises(EmbeddingError, match="identical"):
            compute_tsne(np.ones((100, 4)), perplexity=5)


class TestScoring:
    def test_separability(self):
        samples = fake_samples(40, mask_names=("All", "FLAIR"))
        apart = np.array([[0.0, i] if s.mask_name == "All" else [100.0, i] for i, s in enumerate(samples)])
        assert mask_separability(apart, samples) == 1.0
        mixed = np.array([[float(i), 0.0] for i in range(40)])
        assert mask_separability(mixed, samples) == 0.0


class TestRender:
    def test_writes_png(self, tmp_path):
        samples = fake_samples(30)
        points = np.random.default_rng(0).normal(size=(30, 2))
        path = render_scatter(points, samples, "predicted_label", tmp_path / "plots" / "pred.png")
        assert path.exists() and path.stat().st_size > 0

    def test_panel_per_mask(self, tmp_path, monkeypatch):
        import heteroseg.embedding_viz as viz

        panels = []
        original = viz.plt.subplots
        monkeypatch.setattr(viz.plt, "subplots", lambda rows, cols, **kw: panels.append(cols) or original(rows, cols, **kw))
        samples = fake_samples(30, mask_names=("All", "T2W", "FLAIR"))
        render_scatter(np.zeros((30, 2)), samples, "mask_name", tmp_path / "masks.png")
        assert panels == [3]

    def test_empty_class_warns(self, tmp_path, caplog):
        render_scatter(np.zeros((30, 2)), fake_samples(30), "true_label", tmp_path / "true.png")
        assert caplog.text.count("no samples with true_label") == 3

    def test_unknown_highlight(self, tmp_path):
        with pytest.raises(EmbeddingError, match="unknown highlight"):
            render_scatter(np.zeros((3, 2)), fake_samples(3), "intensity", tmp_path / "x.png")

    def test_length_mismatch(self, tmp_path):
        with pytest.raises(EmbeddingError):
            render_scatter(np.zeros((2, 2)), fake_samples(3), "mask_name", tmp_path / "x.png")


class TestWrite:
    def test_csv_and_meta(self, tmp_path):
        samples = fake_samples(4, mask_names=("All", "T1W"))
        meta = EmbeddingMeta(perplexity=5, seed=0, iterations=250, hidden_width=3, n_samples=4, masks=["All", "T1W"])
        write_embedding(tmp_path, np.arange(8, dtype=float).reshape(4, 2), samples, meta)
        frame = pd.read_csv(tmp_path / "embedding.csv")
        assert list(frame.columns) == ["voxel_id", "mask", "x", "y", "pred", "true"]
        assert frame["voxel_id"].tolist()[1] == "s:1:0:0"
        assert frame["mask"].tolist() == ["All", "T1W", "All", "T1W"]
        assert json.loads((tmp_path / "meta.json").read_text())["method"] == "barnes_hut"


class TestVisualize:
    def test_end_to_end(self, tmp_path, phantoms, tiny_network):
        model = build_model(tiny_network(NetworkKind.MULTIPATH_SHAREDREP), seed=0)
        meta = visualize(
            model, phantoms[4:], tmp_path, masks=default_masks(4), n_patches=2, n_voxels=100,
            input_side=20, depth=2, perplexity=10, seed=0, iterations=250,
        )
        assert meta.n_samples == 100
        assert meta.masks == ["All", "T1W", "T1WC", "T2W", "FLAIR"]
        assert 0.0 <= meta.mask_separability <= 1.0
        assert -1.0 <= meta.silhouette <= 1.0
        for key in ("predicted_label", "true_label", "mask_name"):
            assert (tmp_path / f"tsne_{key}.png").stat().st_size > 0
        assert len(pd.read_csv(tmp_path / "embedding.csv")) == 100
