"""CLI: export caption embeddings to TEMB; verify existing files."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from temb_exporter.captions import CaptionError, load_captions
from temb_exporter.encoders import EncoderError, make_encoder
from temb_exporter.export import export_embeddings
from temb_exporter.temb import TembError, read_temb


def cmd_export(args) -> int:
    captions = load_captions(args.captions)
    encoder = make_encoder(args.encoder, hashed_width=args.width)
    summary = export_embeddings(captions, encoder, k=args.tokens, out_path=args.out)
    print(f"wrote {summary['records']} records (K={summary['tokens']}, "
          f"e={summary['width']}, encoder={summary['encoder']}) -> {args.out}")
    return 0


def cmd_verify(args) -> int:
    k, e, records = read_temb(args.path)
    norms = np.concatenate([np.linalg.norm(rows, axis=1) for _, rows in records]) \
        if records else np.zeros(0)
    print(f"magic: TEMB  version: 1  records: {len(records)}  tokens: {k}  width: {e}")
    if norms.size:
        print(f"row norms: min {norms.min():.6f}  mean {norms.mean():.6f}  max {norms.max():.6f}")
        if norms.max() > 1e3:
            print("warning: row norms exceed 1e3; payload may have the wrong endianness")
        zero = int(np.count_nonzero(norms == 0.0))
        if zero:
            print(f"note: {zero} zero-norm rows (zero padding)")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="temb-exporter",
        description="Run a pre-trained text encoder over captions and write TEMB files")
    sub = parser.add_subparsers(dest="command", required=True)

    p_export = sub.add_parser("export", help="encode captions into a TEMB file")
    p_export.add_argument("--captions", required=True, help="file of 'id<TAB>caption' lines")
    p_export.add_argument("--encoder", required=True,
                          help="'hashed' or a Hugging Face model id / local path")
    p_export.add_argument("--tokens", type=int, default=4, help="tokens per record (K)")
    p_export.add_argument("--width", type=int, default=24,
                          help="embedding width for the hashed encoder")
    p_export.add_argument("--out", required=True)
    p_export.set_defaults(fn=cmd_export)

    p_verify = sub.add_parser("verify", help="validate a TEMB file and print a summary")
    p_verify.add_argument("path")
    p_verify.set_defaults(fn=cmd_verify)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (CaptionError, EncoderError, TembError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
