"""Shared builders and fixtures for the test suite."""

from __future__ import annotations

from datetime import datetime, timedelta

import pytest

from homesynth.core import Behavior, BehaviorSequence, Origin
from homesynth.seqmodel import ModelConfig, train_autoencoder
from homesynth.simulate import default_profile, generate_corpus

BASE = datetime(2022, 1, 3, 0, 0)


def seq(spec, sid="s", origin=Origin.RAW, base=BASE):
    """Build a sequence from (minutes_offset, device, action) triples."""
    return BehaviorSequence(
        behaviors=tuple(
            Behavior(timestamp=base + timedelta(minutes=m), device=d, action=a)
            for m, d, a in spec
        ),
        id=sid,
        origin=origin,
    )


def token_seq(tokens, sid="s", origin=Origin.RAW, base=BASE, step_minutes=10):
    """Sequence whose behaviors are `Device:action` tokens at fixed spacing."""
    spec = []
    for i, token in enumerate(tokens):
        device, _, action = token.partition(":")
        spec.append((i * step_minutes, device, action))
    return seq(spec, sid=sid, origin=origin, base=base)


SMALL_MODEL = ModelConfig(
    embed_dim=32,
    heads=2,
    layers=1,
    ffn_dim=64,
    max_len=64,
    epochs=6,
    batch_size=16,
    learning_rate=3e-3,
    seed=11,
)


@pytest.fixture(scope="session")
def sim_corpus():
    """Reference simulator corpus shared by model-level tests."""
    return generate_corpus(default_profile(seed=5, noise_rate=0.02), 30)


@pytest.fixture(scope="session")
def sim_model(sim_corpus):
    return train_autoencoder(sim_corpus, SMALL_MODEL)
