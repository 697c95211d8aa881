"""Command-line surface: export, reference, parity.

Exit codes: 0 on success, 2 on validation failures (bad files, incomplete
maps, shape mismatches), and — for ``parity`` only — 1 when the comparison
itself exceeds the tolerance.
"""

import argparse
import json
import sys

import numpy as np

from . import __version__
from .convert import export_checkpoint
from .errors import ValidationError
from .ffwd_format import read_engine_checkpoint
from .namemap import load_name_map
from .parity import load_logits, parity_report
from .reference import read_token_sequences, reference_last_logits


def cmd_export(args) -> int:
    summary = export_checkpoint(args.src, args.map, args.out)
    print(
        f"wrote {summary['out']}: {summary['n_tensors']} tensors, "
        f"{summary['n_parameters']} parameters"
        f"{', tied output head' if summary['tied_output'] else ''}"
    )
    return 0


def cmd_reference(args) -> int:
    name_map = load_name_map(args.map)
    if args.src.endswith(".ffwd"):
        config, tensors = read_engine_checkpoint(args.src)
    else:
        from .convert import collect_engine_tensors
        from .safetensors_io import SafetensorsFile
        config = name_map.config
        tensors = collect_engine_tensors(SafetensorsFile(args.src), name_map)
    sequences = read_token_sequences(args.tokens)
    logits = [
        reference_last_logits(config, tensors, np.asarray(seq))
        for seq in sequences
    ]
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump({"logits": [[float(x) for x in row] for row in logits]},
                  fh, indent=2)
        fh.write("\n")
    print(f"wrote reference logits for {len(logits)} sequence(s) to {args.out}")
    return 0


def cmd_parity(args) -> int:
    report = parity_report(load_logits(args.engine_logits),
                           load_logits(args.ref_logits))
    report["tolerance"] = args.tolerance
    report["within_tolerance"] = report["max_abs_diff"] <= args.tolerance
    if args.report is not None:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(
        f"{report['n_sequences']} sequence(s): max |diff| = "
        f"{report['max_abs_diff']:.3e}, argmax agreement = "
        f"{report['argmax_agreement']:.0%}"
    )
    return 0 if report["within_tolerance"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ffwd-export",
        description="Convert community checkpoints to engine checkpoints",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="convert a checkpoint via a name map")
    p.add_argument("--src", required=True, help="source checkpoint")
    p.add_argument("--map", required=True, help="name map JSON")
    p.add_argument("--out", required=True, help="engine checkpoint to write")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("reference",
                       help="compute reference last-position logits")
    p.add_argument("--src", required=True,
                   help="source checkpoint, or an exported .ffwd file")
    p.add_argument("--map", required=True, help="name map JSON")
    p.add_argument("--tokens", required=True,
                   help="token sequences, one per line")
    p.add_argument("--out", required=True, help="logits JSON to write")
    p.set_defaults(func=cmd_reference)

    p = sub.add_parser("parity", help="compare engine logits against a reference")
    p.add_argument("--engine-logits", required=True,
                   help="engine prefill report JSON")
    p.add_argument("--ref-logits", required=True, help="reference logits JSON")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--report", default=None, help="write the stats JSON here")
    p.set_defaults(func=cmd_parity)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
