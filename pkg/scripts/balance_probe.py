"""Probe how much next-treatment information survives in the learned representation."""
import argparse

from cfseq.experiments import PROFILES, balance_probe, tumor_config


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--profile", choices=sorted(PROFILES), default="reduced")
    p.add_argument("--gamma", type=float, nargs="+", default=[3.0])
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    print("gamma,majority,probe_phi,probe_raw")
    for g in args.gamma:
        r = balance_probe(tumor_config(args.profile, gamma=g, seeds=(args.seed,)), args.seed)
        print(f"{g},{r.majority:.4f},{r.acc_phi:.4f},{r.acc_raw:.4f}")


if __name__ == "__main__":
    main()
