"""Ablation study on the tumor simulator: base model against each single-flag variant."""
import argparse
import sys
from pathlib import Path

import numpy as np

from cfseq.config import ABLATION_FLAGS
from cfseq.evalkit import per_seed_csv, report_csv
from cfseq.experiments import PROFILES, horizon_benchmark, tumor_config
from cfseq.expcli.svg import render_nrmse_svg
from cfseq.simkit.cohort import atomic_write_text


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--profile", choices=sorted(PROFILES), default="reduced")
    p.add_argument("--variants", nargs="*", default=list(ABLATION_FLAGS))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--out", default="runs/ablations")
    args = p.parse_args(argv)

    def progress(variant, seed, res):
        print(f"{variant} seed {seed}: mean NRMSE {np.mean(res.rmse / res.norm_const):.3f}", file=sys.stderr,
              flush=True)

    reports = horizon_benchmark(tumor_config(args.profile, seeds=args.seeds), args.variants, progress=progress)
    out = Path(args.out)
    atomic_write_text(out / "ablations.csv", report_csv(reports.values()))
    atomic_write_text(out / "ablations_per_seed.csv", per_seed_csv(reports.values()))
    series = {v: list(zip(range(1, len(r.nrmse) + 1), r.nrmse.tolist())) for v, r in reports.items()}
    atomic_write_text(out / "ablations.svg", render_nrmse_svg(series, title="Ablations: NRMSE by horizon"))
    for v, r in reports.items():
        print(f"{v:>14}: mean NRMSE {r.mean_nrmse():.3f}")


if __name__ == "__main__":
    main()
