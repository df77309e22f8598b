"""Per-cell background MSE and subject-mask IoU over a (k_t, k_l) gate grid.

    python3 scripts/gating_sweep.py --base runs/toy/base.pgck --stitch runs/toy/stitch.pgck --out sweep.csv
"""
import argparse
import csv

import torch

from posegen import Checkpoint, LongVideoInputs, generate_scene, plan_segments
from posegen.long_video import gate_sweep
from posegen.synth import default_spec


def ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",")]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--base", required=True)
    ap.add_argument("--stitch", required=True)
    ap.add_argument("--k-t", type=ints, default=[0, 1, 5, 20])
    ap.add_argument("--k-l", type=ints, default=None, help="default: 0,1,L/2,L")
    ap.add_argument("--length", type=int, default=40)
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--scene", type=int, default=1000)
    ap.add_argument("--out", default="sweep.csv")
    args = ap.parse_args()
    torch.set_num_threads(1)

    base, stitch = Checkpoint.load(args.base), Checkpoint.load(args.stitch)
    L = base.dit.L
    k_l = args.k_l or sorted({0, 1, L // 2, L})
    scene = generate_scene(default_spec(args.scene, args.length), args.length, 64, 64)
    inputs = LongVideoInputs(scene.reference, scene.pose, scene.hand, scene.spec.caption_tokens,
                             list(scene.spec.subject_token_indices))
    plan = plan_segments(args.length, 16, 0.25)
    cells = [(kt, kl) for kt in args.k_t for kl in k_l]
    rows = gate_sweep(plan, inputs, base, stitch, scene.gt_subject_mask, cells, args.steps)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["k_t", "k_l", "bg_mse_vs_source", "mask_iou", "cache_bytes"])
        for r in rows:
            writer.writerow([r["k_t"], r["k_l"], repr(r["bg_mse_vs_source"]), repr(r["mask_iou"]), r["cache_bytes"]])
            print(f"k_t={r['k_t']:2d} k_l={r['k_l']:2d} bg_mse={r['bg_mse_vs_source']:.6f} "
                  f"iou={r['mask_iou']:.4f} cache={r['cache_bytes']}")


if __name__ == "__main__":
    main()
