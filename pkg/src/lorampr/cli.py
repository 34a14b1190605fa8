"""Command-line front end.

Subcommands: phy-sim, colocated-study, ideal-mapping-study, net-sim,
make-trace, decode-trace.  Flags override values from an optional JSON
config file (--config); results go to stdout and optionally to CSV (--out).
"""

from __future__ import annotations

import argparse
import json
import sys

from .harness import (
    CSV_HEADER,
    ExperimentConfig,
    decode_trace,
    ideal_net_throughput,
    make_trace,
    run_colocated_study,
    run_ideal_mapping_study,
    run_net_sim,
    run_phy,
    write_csv,
)
from .params import LoraParams, params_from_dict, _parse_cr


def _add_common(sub):
    sub.add_argument("--sf", type=int)
    sub.add_argument("--bw", type=float)
    sub.add_argument("--cr", type=str, help="coding rate, e.g. 4/8 or 8")
    sub.add_argument("--users", type=int)
    sub.add_argument("--snr", type=str, help="comma-separated SNR grid in dB")
    sub.add_argument("--trials", type=int)
    sub.add_argument("--strategy", choices=("v-peak", "m-peak", "m-full-peak"))
    sub.add_argument("--topk", type=int)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--payload-bytes", type=int)
    sub.add_argument("--workers", type=int)
    sub.add_argument("--config", type=str, help="JSON config file")
    sub.add_argument("--out", type=str, help="CSV output path")


def build_config(args) -> ExperimentConfig:
    file_cfg = {}
    if args.config:
        with open(args.config) as fh:
            file_cfg = json.load(fh)

    pdict = dict(file_cfg.get("params", {}))
    for key, val in (
        ("sf", args.sf), ("bw", args.bw), ("payload_bytes", args.payload_bytes),
    ):
        if val is not None:
            pdict[key] = val
    if args.cr is not None:
        pdict["n_c"] = _parse_cr(args.cr)
    params = params_from_dict(pdict) if pdict else LoraParams()

    kwargs = {k: v for k, v in file_cfg.items() if k != "params"}
    if args.users is not None:
        kwargs["m"] = args.users
    if args.snr is not None:
        kwargs["snr_grid"] = tuple(float(s) for s in args.snr.split(","))
    for key, attr in (
        ("trials", "trials"), ("strategy", "strategy"), ("topk", "k"),
        ("seed", "seed"), ("workers", "workers"),
    ):
        val = getattr(args, key if key != "topk" else "topk")
        if val is not None:
            kwargs[attr] = val
    if getattr(args, "decoder", None):
        kwargs["decoder"] = args.decoder
    if getattr(args, "duration", None):
        kwargs["duration"] = args.duration
    if getattr(args, "unco", False):
        kwargs["unco"] = True
    if getattr(args, "agg", None):
        kwargs["agg_fn"] = args.agg
    return ExperimentConfig(params=params, **kwargs)


def _emit(rows, out_path):
    print(CSV_HEADER)
    for row in rows:
        print(row.to_csv())
    if out_path:
        write_csv(rows, out_path)
        print(f"# wrote {out_path}", file=sys.stderr)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="lorampr", description=__doc__)
    subs = ap.add_subparsers(dest="command", required=True)

    for name in ("phy-sim", "colocated-study", "ideal-mapping-study"):
        sub = subs.add_parser(name)
        _add_common(sub)

    net = subs.add_parser("net-sim")
    _add_common(net)
    net.add_argument("--decoder", choices=("hard", "soft", "ideal"))
    net.add_argument("--duration", type=float, help="simulated seconds")
    net.add_argument("--unco", action="store_true", help="uncoordinated ALOHA delays")
    net.add_argument("--agg", choices=("sum", "average", "min", "max"))

    mk = subs.add_parser("make-trace")
    _add_common(mk)
    mk.add_argument("path", help="output .iq path (sidecar .json written too)")

    dec = subs.add_parser("decode-trace")
    _add_common(dec)
    dec.add_argument("path", help="input .iq path")

    args = ap.parse_args(argv)
    cfg = build_config(args)

    if args.command == "phy-sim":
        _emit(run_phy(cfg), args.out)
    elif args.command == "colocated-study":
        _emit(run_colocated_study(cfg), args.out)
    elif args.command == "ideal-mapping-study":
        _emit(run_ideal_mapping_study(cfg), args.out)
    elif args.command == "net-sim":
        rows, _, agg = run_net_sim(cfg)
        _emit(rows, args.out)
        ideal = ideal_net_throughput(cfg)
        print(f"# ideal throughput {ideal:.1f} bit/s", file=sys.stderr)
        print(f"# aggregate[{agg['fn']}] rounds_with_data={agg['rounds_with_data']} "
              f"mean_abs_error={agg['mean_abs_error']}", file=sys.stderr)
    elif args.command == "make-trace":
        meta = make_trace(cfg, args.path)
        print(json.dumps(meta, indent=1))
    elif args.command == "decode-trace":
        print(json.dumps(decode_trace(args.path, cfg), indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
