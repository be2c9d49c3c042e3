"""Train the prototype embedding on four Gaussian blobs and look at it.

Run: python demos/01_prototype_embedding.py
"""
import numpy as np

from cilf.data import Standardizer, gen_synthetic
from cilf.encoder import EncoderConfig
from cilf.prototypes import nearest_prototype, proto_prob
from cilf.training import train_initial

ds = gen_synthetic(num_classes=4, per_class=150, dim=2, spread=0.05, separation=10.0, seed=0)
X = Standardizer.fit(ds.inputs)(ds.inputs)

model, protos, history = train_initial(X, ds.labels, EncoderConfig(2, (64, 32), 16, init_seed=0),
                                       epochs=20, seed=0, return_history=True)
print("loss per epoch:", np.round(history, 3))

E = model.embed(X)
pred = nearest_prototype(E, protos)
print("training accuracy:", np.mean(pred == ds.labels))

# distances to the own prototype vs between prototypes
M = protos.matrix()
own = np.linalg.norm(E - M[ds.labels], axis=1).mean()
between = np.linalg.norm(M[:, None] - M[None], axis=-1)
print("mean distance to own prototype: %.3f" % own)
print("smallest distance between prototypes: %.3f" % between[np.triu_indices(4, 1)].min())

# the prototype softmax is confident far from the decision boundaries
p = proto_prob(E[:5], protos, alpha=0.3)
print("class probabilities of the first five points:")
print(np.round(p, 4))
