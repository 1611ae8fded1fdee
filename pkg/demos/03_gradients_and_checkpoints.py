"""
Checking the gradients, then saving the model
=============================================

The library differentiates through convolutions, the shared CNN and the
gated recurrence with a small reverse-mode tape. Here we compare it with
central finite differences on a micro model, then write a checkpoint and
read it back bit for bit.

Run:  python3 demos/03_gradients_and_checkpoints.py
"""
import tempfile
from pathlib import Path

import numpy as np

from srnn import checkpoint as ckpt
from srnn import gradcheck

# every parameter tensor of both recurrent heads, double precision
for r in gradcheck.run(seed=0):
    print(f"{r.head:<14}{r.name:<20}relative error {r.rel_error:.2e}")

model, _, _ = gradcheck.micro_problem("srnn_halfgru", np.random.default_rng(1))
model = model.astype(np.float32)

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "micro.srnn"
    ckpt.checkpoint_save(model, path)
    blob = path.read_bytes()
    print(f"\ncheckpoint: {len(blob)} bytes, magic {blob[:4]!r}, tensors {list(ckpt.load(path))}")
    back = ckpt.checkpoint_load(path)
    same = all(back.params[k].data.tobytes() == model.params[k].data.tobytes() for k in model.params)
    print("bitwise round trip:", same)

    broken = bytearray(blob)
    broken[30] ^= 1
    try:
        ckpt.decode(bytes(broken))
    except ckpt.CheckpointError as exc:
        print("one flipped bit:", exc)
