"""
Classifying digits through the grid substrate
=============================================

A linear digit classifier is just one matrix product, logits = X @ W, and a
matrix product is something the substrate can run.  The pipeline tiles the
product into 8x8 block jobs, lays each job out on its own 32x32 grid, runs
them, and sums the partial products back into logits.

Here the jobs run on the oracle backend, which computes each block product
exactly; swap in a trained checkpoint and the same jobs run as rollouts.
Needs the digit data under data/mnist (see the README).
"""

import numpy as np

from autocell.emulation import (aggregate_and_evaluate, block_decompose,
                                emulation_placements, execute_blocks,
                                load_mnist, train_linear_classifier)

train = load_mnist("data/mnist/train-images-idx3-ubyte.gz",
                   "data/mnist/train-labels-idx1-ubyte.gz")
test = load_mnist("data/mnist/t10k-images-idx3-ubyte.gz",
                  "data/mnist/t10k-labels-idx1-ubyte.gz")
print("train/test sizes:", len(train.labels), len(test.labels))

w = train_linear_classifier(train, epochs=3, rng=np.random.default_rng(0))

# A small test slice keeps the job count readable: 32 images -> 4 row blocks,
# 784 inputs -> 98 inner blocks, 10 logits pad to 2 column blocks.
x, labels = test.images[:32], test.labels[:32]
jobs, amap = block_decompose(x, w)
print("jobs:", len(jobs), "=",
      f"{amap.row_blocks} row x {amap.inner_blocks} inner x {amap.col_blocks} col blocks")

# Every job reuses one fixed grid layout: A beside the product sharing its
# rows, B above it sharing its columns.
for p in emulation_placements():
    print(f"  {p.role:6s} {p.tag:3s} at ({p.row},{p.col}) size {p.rows}x{p.cols}")

partials, errors = execute_blocks(jobs, backend="oracle")
metrics = aggregate_and_evaluate(partials, amap, labels, w, x)
print("emulated accuracy:  ", metrics["emulated_accuracy"])
print("reference accuracy: ", metrics["reference_accuracy"])
print("argmax agreement:   ", metrics["agreement"])
print("worst job mse:      ", max(e for _, e in errors))
