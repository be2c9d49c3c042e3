import numpy as np
import pytest

from cilf.data import Standardizer, gen_synthetic
from cilf.encoder import EncoderConfig, dumps_checkpoint
from cilf.errors import UsageError
from cilf.losses import LossConfig
from cilf.training import train_initial


def two_blobs(seed=0):
    ds = gen_synthetic(2, 100, dim=2, spread=1.0, separation=10.0, seed=seed)
    return Standardizer.fit(ds.inputs)(ds.inputs), ds.labels


def test_trained_classes_are_compact():
    X, y = two_blobs()
    model, protos = train_initial(X, y, EncoderConfig(2, (16,), 4, init_seed=0), epochs=20,
                                  batch_size=32, seed=0)
    E = model.embed(X)
    intra = np.mean([np.linalg.norm(E[i] - protos[y[i]]) for i in range(len(y))])
    inter = np.linalg.norm(protos[0] - protos[1])
    assert intra < inter / 4


def test_intra_loss_alone_decreases():
    X, y = two_blobs(1)
    _, _, history = train_initial(X, y, EncoderConfig(2, (16,), 4, init_seed=1),
                                  LossConfig(lambda1=0.0), epochs=5, batch_size=32, seed=1,
                                  return_history=True)
    assert all(b < a for a, b in zip(history, history[1:]))


def test_same_seed_same_checkpoint():
    X, y = two_blobs(2)
    cfg = EncoderConfig(2, (8,), 3, init_seed=5)
    a = train_initial(X, y, cfg, epochs=3, seed=9)
    b = train_initial(X, y, cfg, epochs=3, seed=9)
    assert dumps_checkpoint(*a) == dumps_checkpoint(*b)


def test_single_class_rejected():
    with pytest.raises(UsageError):
        train_initial(np.zeros((4, 2)), [1, 1, 1, 1], EncoderConfig(2, (4,), 2))
