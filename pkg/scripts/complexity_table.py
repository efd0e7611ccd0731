"""Parameter and MAC counts of the default architectures for every pooling head."""
import argparse
import csv
import sys

from tmdnet.layers import geolife_spec, shl_spec
from tmdnet.metrics import count_flops, count_params

POOLINGS = ("gem", "global_avg", "global_max", "flatten")


def rows(input_length: int, flops_per_mac: int):
    for arch, make, fixed in (("geolife", geolife_spec, 1024), ("shl", shl_spec, 6000)):
        for pooling in POOLINGS:
            spec = make(pooling)
            length = fixed if pooling == "flatten" else input_length
            report = count_flops(spec, length, flops_per_mac)
            yield [arch, pooling, count_params(spec).total_params, length, report.total_flops]


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--input-length", type=int, default=500,
                   help="sequence length for the global heads (flatten uses its fixed length)")
    p.add_argument("--flops-x2", action="store_true", help="count 2 FLOPs per multiply-accumulate")
    args = p.parse_args(argv)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["architecture", "pooling", "params", "input_length", "flops"])
    w.writerows(rows(args.input_length, 2 if args.flops_x2 else 1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
