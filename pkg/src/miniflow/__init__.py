"""Miniature dual-stream diffusion transformer lab: rectified flow matching
with an auxiliary vision-aligned text-feature supervision loss, plus the
ablation and evaluation harness around it."""

from miniflow.tensor import Tensor, Tape, ShapeError, TapeError

__all__ = ["Tensor", "Tape", "ShapeError", "TapeError"]
