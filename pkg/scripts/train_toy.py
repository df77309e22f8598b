"""Train the toy base and stitch adapters and report the loss curve.

    python3 scripts/train_toy.py --steps 200 --out runs/toy
"""
import argparse
from pathlib import Path

import torch

from posegen import CodecConfig, DataConfig, DitConfig, TrainConfig, make_dataset, train
from posegen.trainer import smoothed, write_loss_csv


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenes", type=int, default=32)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--layers", type=int, default=4)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/toy"))
    args = ap.parse_args()
    torch.set_num_threads(1)

    data = make_dataset(args.scenes, DataConfig(frames=17, height=64, width=64), seed=args.seed)
    dit = DitConfig(L=args.layers, d=args.dim, heads=4)
    args.out.mkdir(parents=True, exist_ok=True)
    for role in ("base", "stitch"):
        ck = train(data, TrainConfig(role=role, steps=args.steps, batch_size=4, peak_lr=args.lr, seed=args.seed),
                   dit, CodecConfig(c=dit.c, s=dit.s))
        ck.save(args.out / f"{role}.pgck")
        write_loss_csv(args.out / f"{role}.loss.csv", ck.losses)
        losses = [l for _, l, _ in ck.losses]
        if losses:
            first, last = sum(losses[:20]) / len(losses[:20]), smoothed(losses)[-1]
            print(f"{role}: smoothed loss {first:.3f} -> {last:.3f} (ratio {last / first:.2f})")


if __name__ == "__main__":
    main()
