"""Empirical trend checks on the desk task at σ=0.25 (a few minutes on one core)."""

import numpy as np
import pytest

from smoothcert.blackbox import Coordinator, SpsaSchedule, decorate, spsa_train
from smoothcert.data import desk_dataset
from smoothcert.peft import PeftConfig, attach
from smoothcert.train import TrainConfig, train
from smoothcert.vit import ModelClassifier, VitConfig, VitModel

SIGMA = 0.25


@pytest.fixture(scope="module")
def desk():
    tr, te = desk_dataset("A", "train"), desk_dataset("A", "test")
    full = attach(VitModel.create(VitConfig(), seed=0), PeftConfig(method="full"))
    backbone = train(full, tr, TrainConfig(sigma=0.0, epochs=8, mode="clean_pretrain")).model.frozen_copy()
    return tr, te, backbone


def noisy_accuracy(query, te, seed=5):
    rng = np.random.default_rng(seed)
    x = (te.images + SIGMA * rng.standard_normal(te.images.shape)).astype(np.float32)
    return float(np.mean(query(x).argmax(1) == te.labels))


@pytest.mark.slow
def test_lora_noise_finetune_beats_backbone(desk):
    tr, te, backbone = desk
    tuned = train(attach(backbone, PeftConfig(method="lora", rank=2)), tr, TrainConfig(sigma=SIGMA)).model
    base = noisy_accuracy(ModelClassifier(backbone), te)
    assert noisy_accuracy(ModelClassifier(tuned), te) > base


@pytest.mark.slow
def test_coordinator_beats_undecorated(desk):
    tr, te, backbone = desk
    query = ModelClassifier(backbone)
    coord = Coordinator(backbone)
    spsa_train(coord, query, tr, SpsaSchedule(), SIGMA, steps=400)
    rng = np.random.default_rng(5)
    decorated = decorate(coord, te.images, SIGMA, rng)
    acc = float(np.mean(query(decorated).argmax(1) == te.labels))
    assert acc > noisy_accuracy(query, te)
