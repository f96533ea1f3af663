"""Pose recovery of the canonical alignment against harness ground truth.

Sweeps the oracle depth-noise level and prints the worst and mean rotation
(degrees) and translation (percent of scene diameter) errors.

    python3 scripts/alignment.py
    python3 scripts/alignment.py --frames 60 --clip-len 25 --noise 0 0.005 0.01 0.02
"""
import argparse

from flowsplat.experiments import alignment_errors
from flowsplat.harness import generate, preset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="moving-sphere")
    ap.add_argument("--frames", type=int, default=60)
    ap.add_argument("--clip-len", type=int, default=25)
    ap.add_argument("--noise", type=float, nargs="+", default=[0.0, 0.005, 0.01, 0.02])
    ap.add_argument("--seeds", type=int, default=1, help="oracle noise seeds per level")
    args = ap.parse_args()

    gt = generate(preset(args.preset, n_frames=args.frames))
    print(f"{'noise':>7}{'seed':>6}{'rot max':>10}{'rot mean':>10}{'trans max %':>13}{'trans mean %':>14}")
    for noise in args.noise:
        for seed in range(args.seeds if noise > 0 else 1):
            rot, trans = alignment_errors(gt, args.clip_len, noise, seed)
            print(f"{noise:7.3f}{seed:6d}{rot.max():10.3f}{rot.mean():10.3f}"
                  f"{100 * trans.max():13.3f}{100 * trans.mean():14.3f}")


if __name__ == "__main__":
    main()
