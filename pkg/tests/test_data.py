import numpy as np
import pytest

from miniflow.data import DatasetSpec, SyntheticDataset
from miniflow.model import ModelConfig

CFG = ModelConfig(depth=2, hidden_dim=16, heads=2, latent_shape=(2, 4, 4),
                  patch_size=2, text_tokens=3, text_embed_dim=8)


def test_regeneration_is_bitwise_identical():
    spec = DatasetSpec(num_classes=4, size=64)
    a = SyntheticDataset(spec, CFG, seed=5)
    b = SyntheticDataset(spec, CFG, seed=5)
    assert np.array_equal(a.latents, b.latents)
    assert np.array_equal(a.text_table, b.text_table)
    assert np.array_equal(a.train_indices, b.train_indices)
    c = SyntheticDataset(spec, CFG, seed=6)
    assert not np.array_equal(a.latents, c.latents)


def test_prototypes_pairwise_distinct():
    spec = DatasetSpec(num_classes=8, size=64)
    ds = SyntheticDataset(spec, CFG, seed=0)
    ids = sorted(ds.prototypes)
    gaps = [np.linalg.norm(ds.prototypes[i] - ds.prototypes[j])
            for i in ids for j in ids if i < j]
    assert min(gaps) > 1.0


def test_caption_is_class_id_and_jitter_scale():
    spec = DatasetSpec(num_classes=4, size=400, jitter=0.1)
    ds = SyntheticDataset(spec, CFG, seed=1)
    for idx in range(0, 400, 37):
        cid = int(ds.caption_ids[idx])
        assert cid == idx % 4
        gap = np.linalg.norm(ds.latents[idx] - ds.prototypes[cid])
        assert gap < 0.1 * 6 * np.sqrt(np.prod(CFG.latent_shape))


def test_split_is_disjoint_and_80_20():
    spec = DatasetSpec(num_classes=4, size=100)
    ds = SyntheticDataset(spec, CFG, seed=2)
    assert len(ds.train_indices) == 80
    assert len(ds.holdout_indices) == 20
    assert not set(ds.train_indices) & set(ds.holdout_indices)
    assert len(ds) == 80
    latent, cid = ds[0]
    assert latent.shape == CFG.latent_shape and 0 <= cid < 4


def test_text_cond_lookup():
    spec = DatasetSpec(num_classes=4, size=64)
    ds = SyntheticDataset(spec, CFG, seed=3)
    assert ds.text_cond(2).shape == (CFG.text_tokens, CFG.text_embed_dim)
    with pytest.raises(KeyError):
        ds.text_cond(4)


def test_spec_validation():
    with pytest.raises(ValueError):
        DatasetSpec(num_classes=0)
    with pytest.raises(ValueError):
        DatasetSpec(num_classes=8, size=4)
    with pytest.raises(ValueError):
        DatasetSpec(jitter=-0.5)
