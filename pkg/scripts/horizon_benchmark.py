"""Tumor simulator, gamma = 1, tau = 10: NRMSE by horizon for the full model over five seeds."""
import argparse
import sys
from pathlib import Path

import numpy as np

from cfseq.evalkit import per_seed_csv, report_csv
from cfseq.experiments import PROFILES, horizon_trend, horizon_benchmark, tumor_config
from cfseq.expcli.svg import render_nrmse_svg
from cfseq.simkit.cohort import atomic_write_text


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--profile", choices=sorted(PROFILES), default="reduced")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--out", default="runs/horizon")
    args = p.parse_args(argv)

    cfg = tumor_config(args.profile, gamma=args.gamma, seeds=args.seeds)

    def progress(variant, seed, res):
        print(f"seed {seed}: mean NRMSE {np.mean(res.rmse / res.norm_const):.3f}", file=sys.stderr, flush=True)

    rep = horizon_benchmark(cfg, progress=progress)["full"]
    out = Path(args.out)
    atomic_write_text(out / "horizon.csv", report_csv([rep]))
    atomic_write_text(out / "horizon_per_seed.csv", per_seed_csv([rep]))
    series = {"full": list(zip(range(1, len(rep.nrmse) + 1), rep.nrmse.tolist()))}
    atomic_write_text(out / "horizon.svg", render_nrmse_svg(series, sd={"full": rep.nrmse_sd.tolist()}))
    sd = rep.nrmse_sd
    for h in (1, 10):
        print(f"tau={h}: NRMSE {rep.nrmse[h - 1]:.3f} +/- {sd[h - 1]:.3f}")
    print(f"Spearman(horizon, NRMSE) = {horizon_trend(rep.nrmse):.3f}")


if __name__ == "__main__":
    main()
