"""Flow-matching ablation on a harness preset.

Trains every run from one shared canonical initialization and prints held-out
PSNR and flow endpoint errors per run.

    python3 scripts/ablation.py --steps 7000
    python3 scripts/ablation.py --steps 2000 --runs base:0:0 ff:1:0 ffcf:1:0.1
"""
import argparse
import logging

from flowsplat.experiments import DEFAULT_RUNS, AblationRun, ablation
from flowsplat.harness import generate, preset


def parse_run(text: str) -> AblationRun:
    name, ff, cf = text.split(":")
    return AblationRun(name, float(ff), float(cf))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="moving-sphere")
    ap.add_argument("--frames", type=int, default=None)
    ap.add_argument("--steps", type=int, default=7000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--runs", nargs="+", type=parse_run, default=list(DEFAULT_RUNS),
                    help="name:lambda_ff:lambda_cf entries")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    over = {"n_frames": args.frames} if args.frames else {}
    gt = generate(preset(args.preset, **over))
    res = ablation(gt, args.runs, steps=args.steps, seed=args.seed)
    print(f"{'run':<18}{'psnr':>8}{'static':>8}{'dynamic':>8}{'epe_dyn':>9}{'epe_st':>8}{'epe_cam':>9}{'sec':>7}")
    for name, r in res.items():
        e = r.evaluation
        print(f"{name:<18}{e.psnr:8.3f}{e.psnr_static:8.3f}{e.psnr_dynamic:8.3f}"
              f"{e.epe_dynamic:9.3f}{e.epe_static:8.4f}{e.epe_cam_static:9.4f}{r.seconds:7.0f}")


if __name__ == "__main__":
    main()
