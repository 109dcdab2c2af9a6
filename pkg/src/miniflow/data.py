"""Synthetic paired dataset: per-class latent prototypes with Gaussian
jitter, caption id == class id, and a fixed per-class text condition.

Classes come in sibling pairs: each pair shares one strong coarse component
and the two members differ only by a small class-specific fine component.
Telling siblings apart is therefore a fine-grained conditional detail that
the reconstruction objective weights weakly, which is exactly the regime the
feature-supervision loss is meant to help with.

Everything regenerates bitwise from (spec, model config, seed); training
indexes the 80% split, evaluation reads the held-out 20%.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from miniflow.model import ModelConfig
from miniflow.seeds import derive_rng


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 8
    size: int = 2048
    jitter: float = 0.1
    prototype_scale: float = 2.0  # coarse component, shared by sibling pairs
    fine_scale: float = 0.25      # class-specific component separating siblings
    text_scale: float = 1.0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.size < self.num_classes:
            raise ValueError(f"size {self.size} smaller than num_classes {self.num_classes}")
        if self.jitter < 0:
            raise ValueError(f"jitter must be >= 0, got {self.jitter}")
        if self.fine_scale < 0:
            raise ValueError(f"fine_scale must be >= 0, got {self.fine_scale}")


class SyntheticDataset:
    """Indexable over the training split; holdout arrays exposed for eval."""

    def __init__(self, spec: DatasetSpec, model_cfg: ModelConfig, seed: int):
        self.spec = spec
        self.seed = seed
        shape = model_cfg.latent_shape

        proto_rng = derive_rng(seed, "dataset-prototypes")
        groups = (spec.num_classes + 1) // 2
        coarse = proto_rng.normal(0.0, spec.prototype_scale, size=(groups,) + shape)
        fine = proto_rng.normal(0.0, spec.fine_scale, size=(spec.num_classes,) + shape)
        protos = coarse[np.arange(spec.num_classes) // 2] + fine
        self.prototypes = {c: protos[c] for c in range(spec.num_classes)}
        if spec.num_classes > 1:
            gaps = [np.linalg.norm(protos[i] - protos[j])
                    for i in range(spec.num_classes) for j in range(i + 1, spec.num_classes)]
            if min(gaps) <= 1.0:
                raise ValueError(f"prototype collision: min pairwise L2 gap {min(gaps):.3f} <= 1.0")

        jitter_rng = derive_rng(seed, "dataset-jitter")
        self.caption_ids = np.arange(spec.size) % spec.num_classes
        noise = jitter_rng.standard_normal((spec.size,) + shape)
        self.latents = protos[self.caption_ids] + spec.jitter * noise

        text_rng = derive_rng(seed, "dataset-text")
        self.text_table = text_rng.normal(
            0.0, spec.text_scale,
            size=(spec.num_classes, model_cfg.text_tokens, model_cfg.text_embed_dim))

        split_rng = derive_rng(seed, "dataset-split")
        perm = split_rng.permutation(spec.size)
        n_holdout = spec.size // 5
        self.holdout_indices = np.sort(perm[:n_holdout])
        self.train_indices = np.sort(perm[n_holdout:])

    def __len__(self) -> int:
        return len(self.train_indices)

    def __getitem__(self, i: int) -> tuple[np.ndarray, int]:
        idx = self.train_indices[i]
        return self.latents[idx], int(self.caption_ids[idx])

    def text_cond(self, caption_id: int) -> np.ndarray:
        if not 0 <= caption_id < self.spec.num_classes:
            raise KeyError(f"unknown caption id {caption_id} "
                           f"(dataset has classes 0..{self.spec.num_classes - 1})")
        return self.text_table[caption_id]

    @property
    def holdout_latents(self) -> np.ndarray:
        return self.latents[self.holdout_indices]

    @property
    def holdout_caption_ids(self) -> np.ndarray:
        return self.caption_ids[self.holdout_indices]

    def class_ids(self) -> list[int]:
        return list(range(self.spec.num_classes))
