"""Hidden-confounder check: hide the assignment-driving EHR covariates and compare NRMSE per seed."""
import argparse

from cfseq.experiments import PROFILES, ehr_config, masking_experiment


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--profile", choices=sorted(PROFILES), default="reduced")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = p.parse_args(argv)
    print("seed,nrmse_unmasked,nrmse_masked")
    base, masked = masking_experiment(ehr_config(args.profile, seeds=args.seeds),
                                      progress=lambda s, a, b: print(f"{s},{a:.4f},{b:.4f}", flush=True))
    print(f"mean,{base.mean():.4f},{masked.mean():.4f}")


if __name__ == "__main__":
    main()
