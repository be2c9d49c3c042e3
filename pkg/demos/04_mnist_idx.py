"""Stream over MNIST digits read from IDX files.

Five digits are known at the start and one new digit arrives. Pass the
image and label IDX files (the standard train-images-idx3-ubyte and
train-labels-idx1-ubyte, uncompressed); the first ``limit`` images are used.

Run: python demos/04_mnist_idx.py images.idx labels.idx [limit]
"""
import sys

from cilf.pipeline import RunConfig, run_seed

images, labels = sys.argv[1], sys.argv[2]
limit = int(sys.argv[3]) if len(sys.argv) > 3 else 2000
cfg = RunConfig.from_dict({
    "dataset": {"kind": "idx", "images": images, "labels": labels, "limit": limit},
    "stream": {"mode": "single", "C": 5, "T": 1},
    # pixels keep their relative scale; per-pixel scaling inflates rare pixels
    "standardize": "global",
})
res = run_seed(cfg, 0)
w = res.metrics["windows"][0]
print("novel digit:", res.manifest.windows[0].novel)
print("K* = %d, NA = %.3f, AUROC = %.3f" % (w["k_star"], w["na"], w["auroc"]))
print("seconds:", {k: round(v, 1) for k, v in res.timing.items()})
