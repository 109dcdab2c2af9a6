"""Text encoder backends.

``hashed`` is a dependency-free deterministic encoder: each token maps to a
fixed Gaussian direction seeded from its SHA-256 digest. It needs no weights
and produces the same bytes on any machine, which makes it the default for
pipelines and tests. Any other name is treated as a Hugging Face model id or
local path and loaded through ``transformers`` (final-layer token states).
"""

from __future__ import annotations

import hashlib
import re

import numpy as np


class EncoderError(RuntimeError):
    pass


class HashedEncoder:
    """Feature-hashing text encoder: token -> unit Gaussian direction."""

    name = "hashed"

    def __init__(self, width: int = 24):
        if width < 1:
            raise ValueError(f"width must be >= 1, got {width}")
        self.width = width

    def encode(self, text: str) -> np.ndarray:
        tokens = re.findall(r"[\w']+", text.lower())
        if not tokens:
            tokens = [text.strip().lower() or "<empty>"]
        rows = np.stack([self._token_vector(tok) for tok in tokens])
        return rows

    def _token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "little")
        rng = np.random.Generator(np.random.PCG64(seed))
        v = rng.standard_normal(self.width)
        return v / np.linalg.norm(v)


class TransformersEncoder:
    """Final-layer token embeddings from a pre-trained Hugging Face model."""

    def __init__(self, model_name: str):
        self.name = model_name
        try:
            from transformers import AutoModel, AutoTokenizer
        except ImportError as e:
            raise EncoderError(
                f"encoder {model_name!r} needs the 'transformers' package: {e}") from None
        try:
            import torch
            self._torch = torch
            self.tokenizer = AutoTokenizer.from_pretrained(model_name)
            self.model = AutoModel.from_pretrained(model_name)
            self.model.eval()
        except Exception as e:
            raise EncoderError(
                f"encoder {model_name!r} is not available locally: {e}") from None
        self.width = int(self.model.config.hidden_size)

    def encode(self, text: str) -> np.ndarray:
        torch = self._torch
        with torch.no_grad():
            inputs = self.tokenizer(text, return_tensors="pt", truncation=True)
            out = self.model(**inputs)
        return out.last_hidden_state[0].double().cpu().numpy()


def make_encoder(name: str, hashed_width: int = 24):
    if name == "hashed":
        return HashedEncoder(width=hashed_width)
    return TransformersEncoder(name)
