"""Background MSE between non-source key segments and the source, default gate vs empty gate.

    python3 scripts/kv_ablation.py --base runs/toy/base.pgck --stitch runs/toy/stitch.pgck --seeds 5
"""
import argparse
import csv
import sys

import torch

from posegen import Checkpoint, GateConfig, LongVideoInputs, generate_long, generate_scene, plan_segments
from posegen.long_video import mean_nonsource_key_mse, segment_metrics
from posegen.synth import default_spec


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--base", required=True)
    ap.add_argument("--stitch", required=True)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--length", type=int, default=64)
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--attn-mode", default="literal", choices=["literal", "renorm"])
    ap.add_argument("--scene-offset", type=int, default=1000, help="held-out scene seed = offset + seed")
    args = ap.parse_args()
    torch.set_num_threads(1)

    base, stitch = Checkpoint.load(args.base), Checkpoint.load(args.stitch)
    base_model, stitch_model = base.build_model(), stitch.build_model()
    L = base.dit.L
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["seed", "default_bg_mse", "empty_bg_mse", "default_lower"])
    wins = 0
    for seed in range(args.seeds):
        scene = generate_scene(default_spec(args.scene_offset + seed, args.length), args.length, 64, 64)
        inputs = LongVideoInputs(scene.reference, scene.pose, scene.hand, scene.spec.caption_tokens,
                                 list(scene.spec.subject_token_indices))
        plan = plan_segments(args.length, 16, 0.25, seed=seed)
        mse = {}
        for label, gate in (("default", GateConfig.default(args.steps, L)), ("empty", GateConfig.empty(args.steps, L))):
            res = generate_long(plan, inputs, base, stitch, gate, args.steps, attn_mode=args.attn_mode,
                                base_model=base_model, stitch_model=stitch_model)
            rows = segment_metrics(plan, res.video, res.pred_masks, scene.gt_subject_mask, label, res.cache.nbytes())
            mse[label] = mean_nonsource_key_mse(plan, rows)
        lower = mse["default"] < mse["empty"]
        wins += lower
        writer.writerow([seed, repr(mse["default"]), repr(mse["empty"]), int(lower)])
    print(f"# default gate lower in {wins}/{args.seeds} seeds", file=sys.stderr)


if __name__ == "__main__":
    main()
