"""Shared test helpers: micro models and hand-built batches."""

from __future__ import annotations

import numpy as np

from bidistill.data import _build_batch
from bidistill.model import ModelConfig, SBDModel


def micro_model(seed: int = 0, **overrides) -> SBDModel:
    """Small two-decoder model; dropout off so everything is deterministic."""
    base = dict(d_model=16, heads=2, layers=1, d_ffn=32, dropout=0.0,
                src_vocab=12, tgt_vocab=12)
    base.update(overrides)
    return SBDModel(ModelConfig(**base), seed=seed)


def batch_from_pairs(pairs):
    """Batch in the given order (no shuffling), for alignment-sensitive tests."""
    return _build_batch([(list(s), list(t)) for s, t in pairs])


def random_pairs(rng: np.random.Generator, n: int, vocab: int, max_len: int = 6):
    """Random id pairs over the non-special id range, targets EOS-terminated."""
    from bidistill.bpe import EOS, NUM_SPECIALS

    pairs = []
    for _ in range(n):
        ls = int(rng.integers(2, max_len + 1))
        lt = int(rng.integers(2, max_len + 1))
        src = rng.integers(NUM_SPECIALS, vocab, size=ls).tolist()
        tgt = rng.integers(NUM_SPECIALS, vocab, size=lt).tolist() + [EOS]
        pairs.append((src, tgt))
    return pairs
