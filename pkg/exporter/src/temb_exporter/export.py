"""Export pipeline: captions -> encoder -> fixed K tokens -> TEMB."""

from __future__ import annotations

import numpy as np

from temb_exporter.captions import CaptionList
from temb_exporter.temb import write_temb


def fit_tokens(rows: np.ndarray, k: int) -> np.ndarray:
    """Truncate or zero-pad token rows to exactly ``k``, then L2-normalize
    each row. Padding rows stay zero so they pool to nothing downstream."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise ValueError(f"expected [tokens, width] embeddings, got {rows.shape}")
    width = rows.shape[1]
    out = np.zeros((k, width))
    n = min(k, rows.shape[0])
    out[:n] = rows[:n]
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.where(norms == 0, 1.0, norms)


def export_embeddings(captions: CaptionList, encoder, k: int, out_path) -> dict:
    """Encode every caption and write TEMB v1; returns a small summary."""
    if k < 1:
        raise ValueError(f"token count must be >= 1, got {k}")
    records = []
    for cid, text in captions.entries:
        rows = fit_tokens(encoder.encode(text), k)
        records.append((cid, rows))
    write_temb(out_path, records)
    return {
        "records": len(records),
        "tokens": k,
        "width": records[0][1].shape[1],
        "encoder": encoder.name,
    }
