"""Shared builders for the test suite."""

import numpy as np
import pytest

from smoothrot import (
    ModelConfig,
    OutlierProfile,
    Rng,
    build_model,
    inject_outlier_circuit,
)
from smoothrot.harness import sample_tokens


def make_model(seed=0, d=32, m=None, layers=2, heads=None, vocab=64):
    m = m or 4 * d
    heads = heads or max(2, d // 16)
    cfg = ModelConfig(
        vocab_size=vocab, hidden_dim=d, intermediate_dim=m, n_layers=layers, n_heads=heads
    )
    return build_model(cfg, Rng(seed))


def make_spiked_model(seed=0, d=32, m=None, layers=2, channels=(3, 17), magnitude=1400.0,
                      base_scale=0.02, vocab=64):
    model = make_model(seed=seed, d=d, m=m, layers=layers, vocab=vocab)
    profile = OutlierProfile(
        channel_indices=tuple(channels), spike_magnitude=magnitude, base_scale=base_scale
    )
    rng = Rng(seed).derive("inject")
    inject_outlier_circuit(model, profile, rng)
    return model


def make_tokens(seed=0, sequences=2, seq_len=48, vocab=64):
    return sample_tokens(Rng(seed).derive("tokens"), sequences, seq_len, vocab)


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def tiny_tokens():
    return make_tokens()
