"""Offline caption-embedding exporter emitting bit-exact TEMB files."""

from temb_exporter.captions import CaptionList, load_captions
from temb_exporter.temb import TembError, read_temb, write_temb

__all__ = ["CaptionList", "load_captions", "TembError", "read_temb", "write_temb"]
