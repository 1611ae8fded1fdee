"""
Single scale vs. ensembles vs. scale recurrence
===============================================

One seed of the desk-scale comparison on the synthetic shape-by-texture
task: pretrain a single-scale CNN, score it at each pyramid size and as a
logit / probability ensemble, then fine-tune both recurrent heads from it.
The recurrent heads should come out best; the shape is visible at 16x16
but only 64x64 shows the texture, and only the recurrence combines both
into one learned state.

Takes about six minutes on one CPU core.

Run:  python3 demos/02_train_and_compare.py [seed]
"""
import logging
import sys

from srnn.experiment import DESK, run_desk_seed

logging.basicConfig(level=logging.INFO, format="%(message)s")
seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0

result = run_desk_seed(seed, DESK)

print(f"\nseed {seed}, {result.seconds:.0f}s")
print(f"{'head':<16}{'top-1 %':>9}{'top-5 %':>9}")
for head, top1 in result.top1.items():
    print(f"{head:<16}{top1:>9.2f}{result.top5[head]:>9.2f}")

print("\nanytime inference (error after k scales, cumulative MACs per image)")
for head, rows in result.anytime.items():
    for k, err, macs in rows:
        print(f"  {head:<14} k={k}  {err:6.2f}%  {macs:>10,d}")
