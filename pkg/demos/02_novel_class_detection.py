"""Detect a class the model has never seen.

A model trained on classes 0-3 receives a window holding classes 0, 1 and a
new class 5. The detector fine-tunes once per candidate number of novel
clusters, scores each with the silhouette index and keeps the best.

Run: python demos/02_novel_class_detection.py
"""
import numpy as np

from cilf.data import Standardizer, gen_synthetic
from cilf.detector import DetectionConfig, estimate_classes
from cilf.encoder import EncoderConfig
from cilf.metrics import auroc, normalized_accuracy
from cilf.training import train_initial
from cilf.updater import init_memory

ds = gen_synthetic(num_classes=6, per_class=150, dim=2, seed=1)
std = Standardizer.fit(ds.inputs)
X, y = std(ds.inputs), ds.labels

known = y < 4
model, protos = train_initial(X[known], y[known], EncoderConfig(2, init_seed=1), seed=1)
memory = init_memory(X[known], y[known], capacity=200, seed=1)

window = np.isin(y, [0, 1, 5])
report = estimate_classes(model, protos, X[window], k_max=3, cfg=DetectionConfig(), seed=1,
                          reference=(memory.inputs, memory.labels))

print("silhouette score per number of novel clusters:")
for k, v in sorted(report.cvi.items()):
    print("  K=%d  %.2f" % (k, v))
print("estimated novel classes:", report.k_star)

truth = y[window]
print("normalized accuracy: %.3f" % normalized_accuracy(report.pseudo_labels, truth, protos.ids))
print("novelty AUROC: %.3f" % auroc(report.novelty_scores, truth == 5))
