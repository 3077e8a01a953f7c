"""
Which relaxation to use for the energy's input and output?
==========================================================

25 short ENGINE runs from the same tagger, one per (O1, O2) pair. Cells read
``dev energy (dev bleu)``. About three minutes per job.
"""
import sys

from engine_nat import training as tr

from common import data, reference_tagger, teacher

jobs = int(sys.argv[1]) if len(sys.argv) > 1 else 1
train, dev = data()
model = teacher(train, dev)
init = reference_tagger(train, dev)
print("starting point:", tr.nat_dev_metrics(model, init, dev))

grid = tr.operator_grid(model, train, dev, init, tr.TrainConfig(lr=1e-4, epochs=5, weight_decay=0.0), jobs=jobs)
print(grid.to_tsv())

# %% row means: softmax into the teacher (O1 = sx) versus hard argmax tokens (O1 = stl)
for o1 in ("sx", "stl", "sg", "st", "gx"):
    print(f"O1={o1:<3} mean energy {grid.row_mean(o1):.2f}")
print(f"(sx, st) is {100 * (grid.energy('sx', 'st') / grid.min_energy() - 1):.1f}% above the best cell")
