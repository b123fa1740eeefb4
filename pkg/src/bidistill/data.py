"""Corpora, synthetic tasks, and token-count batching.

A batch carries both decoder input matrices: the forward decoder reads
[BOS, y_1, ..., y_{T-1}] and the backward decoder reads
[y_2, ..., y_T, R2L], so position t of either decoder predicts the same
y_t and the two output distributions are directly comparable per
position.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import bpe
from .bpe import BOS, EOS, NUM_SPECIALS, PAD, R2L
from .errors import ContractError, InputError

SYNTHETIC_TASKS = ("copy", "reverse", "agree")

DEFAULT_MAX_EXAMPLE_TOKENS = 256


@dataclass
class ParallelCorpus:
    pairs: list[tuple[list[int], list[int]]]
    skipped: int = 0  # pairs dropped at load time (too long or empty)

    def __post_init__(self):
        for src, tgt in self.pairs:
            if not src or not tgt:
                raise InputError("ParallelCorpus: empty sequence in a pair")
            if tgt[-1] != EOS:
                raise InputError("ParallelCorpus: target does not end with EOS")

    def __len__(self):
        return len(self.pairs)


@dataclass
class ParallelBatch:
    src_ids: np.ndarray       # [B, S] int64, PAD-padded
    tgt_out: np.ndarray       # [B, T] prediction targets y_1..y_T (y_T = EOS)
    fwd_in: np.ndarray        # [B, T] = [BOS, y_1, ..., y_{T-1}]
    bwd_in: np.ndarray        # [B, T] = [y_2, ..., y_T, R2L]
    src_pad_mask: np.ndarray  # [B, S] bool, True on real tokens
    tgt_pad_mask: np.ndarray  # [B, T] bool, True on real tokens

    @property
    def n_real_tgt(self) -> int:
        return int(self.tgt_pad_mask.sum())


def _agree_map(token: int, vocab_size: int) -> int:
    n = vocab_size - NUM_SPECIALS
    return NUM_SPECIALS + ((token - NUM_SPECIALS) * 3 + 1) % n


def gen_synthetic(task: str, n_pairs: int, max_len: int, vocab_size: int,
                  seed: int, min_len: int = 2) -> ParallelCorpus:
    """Deterministic synthetic transduction corpus.

    copy: target repeats the source.  reverse: target is the source
    reversed.  agree: target repeats the source except the final token,
    which is a fixed function of the control token in source position 1;
    a long-range consistency probe.
    """
    if task not in SYNTHETIC_TASKS:
        raise InputError(f"unknown synthetic task {task!r}; choose from {SYNTHETIC_TASKS}")
    if vocab_size <= NUM_SPECIALS:
        raise InputError(f"vocab_size must exceed {NUM_SPECIALS}, got {vocab_size}")
    if max_len < 2 or min_len < 1 or min_len > max_len:
        raise InputError(f"bad length range [{min_len}, {max_len}]")

    rng = np.random.default_rng(seed)
    lo, hi = NUM_SPECIALS, vocab_size
    pairs = []
    for _ in range(n_pairs):
        length = int(rng.integers(min_len, max_len + 1))
        src = rng.integers(lo, hi, size=length).tolist()
        if task == "copy":
            tgt = src + [EOS]
        elif task == "reverse":
            tgt = src[::-1] + [EOS]
        else:  # agree
            control = src[0]
            tgt = src[:-1] + [_agree_map(control, vocab_size)] + [EOS]
        pairs.append((src, tgt))
    return ParallelCorpus(pairs)


def load_parallel(src_path: str, tgt_path: str, bpe_src: bpe.BPEModel, bpe_tgt: bpe.BPEModel,
                  max_tokens_per_example: int = DEFAULT_MAX_EXAMPLE_TOKENS) -> ParallelCorpus:
    """Encode a pair of line-aligned text files; EOS appended to targets.

    Pairs longer than `max_tokens_per_example` on either side (and pairs
    with an empty side) are dropped and counted in `skipped`.
    """
    with open(src_path, encoding="utf-8") as f:
        src_lines = f.read().splitlines()
    with open(tgt_path, encoding="utf-8") as f:
        tgt_lines = f.read().splitlines()
    if len(src_lines) != len(tgt_lines):
        raise InputError(
            f"line count mismatch: {src_path} has {len(src_lines)}, {tgt_path} has {len(tgt_lines)}")

    pairs = []
    skipped = 0
    for s_line, t_line in zip(src_lines, tgt_lines):
        src = bpe.encode(bpe_src, s_line)
        tgt = bpe.encode(bpe_tgt, t_line) + [EOS]
        if not src or len(tgt) < 2:
            skipped += 1
            continue
        if len(src) > max_tokens_per_example or len(tgt) > max_tokens_per_example:
            skipped += 1
            continue
        pairs.append((src, tgt))
    return ParallelCorpus(pairs, skipped=skipped)


def make_backward_input(row: np.ndarray) -> np.ndarray:
    """Left-shift the real positions of a target row and close with R2L.

    [A, B, C, EOS, PAD...] -> [B, C, EOS, R2L, PAD...]
    """
    row = np.asarray(row)
    real = row != PAD
    n = int(real.sum())
    if n == 0 or row[n - 1] != EOS:
        raise ContractError("make_backward_input: row must end with EOS before padding")
    if real[:n].size and not real[:n].all():
        raise ContractError("make_backward_input: padding must be a suffix")
    out = row.copy()
    out[: n - 1] = row[1:n]
    out[n - 1] = R2L
    return out


def _pad_block(rows: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    block = np.full((len(rows), width), PAD, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        block[i, : len(r)] = r
        mask[i, : len(r)] = True
    return block, mask


def _build_batch(pairs: list[tuple[list[int], list[int]]]) -> ParallelBatch:
    src_ids, src_mask = _pad_block([p[0] for p in pairs])
    tgt_out, tgt_mask = _pad_block([p[1] for p in pairs])
    fwd_in = np.full_like(tgt_out, PAD)
    fwd_in[:, 0] = BOS
    fwd_in[:, 1:] = tgt_out[:, :-1]
    fwd_in[~tgt_mask] = PAD
    bwd_in = np.stack([make_backward_input(r) for r in tgt_out])
    return ParallelBatch(src_ids, tgt_out, fwd_in, bwd_in, src_mask, tgt_mask)


def make_batches(corpus: ParallelCorpus, tokens_per_batch: int, seed: int) -> list[ParallelBatch]:
    """Shuffle, length-sort within windows, pack by token budget.

    Every example appears in exactly one batch; a batch closes once
    adding the next example would push max(sum src, sum tgt) past
    `tokens_per_batch`.
    """
    longest = max(max(len(s), len(t)) for s, t in corpus.pairs)
    if tokens_per_batch < longest:
        raise InputError(
            f"tokens_per_batch={tokens_per_batch} below the longest example ({longest} tokens)")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus.pairs))

    # Sort by target length inside windows of ~100 batches' worth of tokens
    # to limit padding without globally ordering the epoch.
    window_tokens = 100 * tokens_per_batch
    windows: list[list[int]] = []
    cur: list[int] = []
    used = 0
    for idx in order:
        s, t = corpus.pairs[idx]
        cur.append(int(idx))
        used += max(len(s), len(t))
        if used >= window_tokens:
            windows.append(cur)
            cur, used = [], 0
    if cur:
        windows.append(cur)

    batches = []
    for win in windows:
        win.sort(key=lambda i: (len(corpus.pairs[i][1]), len(corpus.pairs[i][0])))
        groups: list[list[int]] = []
        cur_g: list[int] = []
        s_sum = t_sum = 0
        for i in win:
            s, t = corpus.pairs[i]
            if cur_g and max(s_sum + len(s), t_sum + len(t)) > tokens_per_batch:
                groups.append(cur_g)
                cur_g, s_sum, t_sum = [], 0, 0
            cur_g.append(i)
            s_sum += len(s)
            t_sum += len(t)
        if cur_g:
            groups.append(cur_g)
        groups = _even_split(win, len(groups), corpus, tokens_per_batch) or groups
        for g in groups:
            batches.append(_build_batch([corpus.pairs[i] for i in g]))
    return batches


def _even_split(win: list[int], n_groups: int, corpus: ParallelCorpus,
                tokens_per_batch: int) -> list[list[int]] | None:
    """Split `win` into `n_groups` contiguous chunks whose sizes differ by at
    most one example, or None if any chunk would blow the token budget.

    Greedy packing alone leaves a ragged tail batch; evening the counts keeps
    gradient noise comparable across steps without changing the batch count.
    """
    if n_groups <= 1:
        return None
    base, extra = divmod(len(win), n_groups)
    chunks = []
    pos = 0
    for k in range(n_groups):
        size = base + (1 if k < extra else 0)
        chunk = win[pos:pos + size]
        pos += size
        s_sum = sum(len(corpus.pairs[i][0]) for i in chunk)
        t_sum = sum(len(corpus.pairs[i][1]) for i in chunk)
        if max(s_sum, t_sum) > tokens_per_batch:
            return None
        chunks.append(chunk)
    return chunks


def write_corpus_text(corpus: ParallelCorpus, src_path: str, tgt_path: str) -> None:
    """Export id sequences as text, one sentence per line, token i as 'w<i>'."""
    with open(src_path, "w", encoding="utf-8") as fs, open(tgt_path, "w", encoding="utf-8") as ft:
        for src, tgt in corpus.pairs:
            fs.write(" ".join(f"w{t}" for t in src) + "\n")
            ft.write(" ".join(f"w{t}" for t in tgt if t != EOS) + "\n")
