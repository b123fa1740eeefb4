"""Decoding.  Production decoding uses only the forward decoder; the
backward stack exists to teach, not to translate.  A separate
length-committed routine decodes with the backward stack alone so that
path can be measured in ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bpe import BOS, EOS, PAD, R2L
from .errors import InputError
from .tensor import Tensor, log_softmax_lastdim

DEFAULT_BEAM = 4
DEFAULT_ALPHA = 0.6
EXTRA_LEN = 10  # decode cap = source length * factor + this


def length_penalty(length: int, alpha: float) -> float:
    """((5 + length) / 6) ** alpha; length counts emitted tokens, EOS included."""
    return ((5.0 + length) / 6.0) ** alpha


def max_decode_len(src_len: int, factor: float) -> int:
    return int(src_len * factor) + EXTRA_LEN


@dataclass
class Hypothesis:
    ids: list[int]     # surface tokens, EOS stripped
    score: float       # sum of token log-probabilities, EOS term included
    norm_score: float  # score / length_penalty(emitted length)


def _finish(ids: list[int], score: float, emitted: int, alpha: float) -> Hypothesis:
    return Hypothesis(ids=ids, score=score,
                      norm_score=score / length_penalty(emitted, alpha))


def beam_search(model, src_ids: list[int], beam: int = DEFAULT_BEAM,
                alpha: float = DEFAULT_ALPHA, max_len_factor: float = 2.0) -> Hypothesis:
    """Beam search over the forward decoder with length-normalized scores.

    Stops early once no live prefix can beat the best finished hypothesis
    even under the most favorable remaining outcome (zero future cost at
    the longest allowed length).  Exact ties rank by token ids so results
    do not depend on insertion order.
    """
    if not src_ids:
        raise InputError("cannot decode an empty source")
    if beam < 1:
        raise InputError(f"beam must be at least 1, got {beam}")
    state = model.init_decode(src_ids)
    cap = max_decode_len(len(src_ids), max_len_factor)

    live: list[tuple[list[int], float]] = [([], 0.0)]
    finished: list[Hypothesis] = []
    for _ in range(cap):
        rows = np.asarray([ids for ids, _ in live], dtype=np.int64).reshape(len(live), -1)
        lp = model.next_logprobs(state, rows)
        flat = []
        for i, (ids, score) in enumerate(live):
            for v in np.argsort(-lp[i])[: beam + 1]:
                flat.append((score + float(lp[i, v]), int(v), i))
        flat.sort(key=lambda c: (-c[0], c[1], c[2]))

        new_live = []
        for score, v, i in flat[:beam]:
            ids = live[i][0]
            if v == EOS:
                finished.append(_finish(ids, score, len(ids) + 1, alpha))
            else:
                new_live.append((ids + [v], score))
        live = new_live
        if not live:
            break
        if finished:
            best_norm = max(h.norm_score for h in finished)
            best_live = max(score for _, score in live)
            bound = best_live / length_penalty(cap, alpha) if best_live < 0.0 else best_live
            if bound <= best_norm:
                break

    for ids, score in live:  # length cap hit without EOS
        finished.append(_finish(ids, score, len(ids), alpha))
    finished.sort(key=lambda h: (-h.norm_score, tuple(h.ids)))
    return finished[0]


def greedy_decode(model, src_ids: list[int], max_len_factor: float = 2.0) -> list[int]:
    """Argmax decoding; agrees with beam_search(beam=1) token for token."""
    if not src_ids:
        raise InputError("cannot decode an empty source")
    state = model.init_decode(src_ids)
    cap = max_decode_len(len(src_ids), max_len_factor)
    ids: list[int] = []
    for _ in range(cap):
        row = np.asarray([ids], dtype=np.int64).reshape(1, -1)
        lp = model.next_logprobs(state, row)[0]
        v = int(np.argmax(lp))
        if v == EOS:
            break
        ids.append(v)
    return ids


def greedy_decode_batch(model, sources: list[list[int]],
                        max_len_factor: float = 2.0) -> list[list[int]]:
    """Greedy decode many sources in one padded batch.

    Matches greedy_decode row by row; rows that emit EOS keep feeding EOS
    so the batch stays rectangular, and their later outputs are ignored.
    """
    if not sources:
        return []
    if any(not s for s in sources):
        raise InputError("cannot decode an empty source")
    b = len(sources)
    s_max = max(len(s) for s in sources)
    src = np.full((b, s_max), PAD, dtype=np.int64)
    for i, s in enumerate(sources):
        src[i, : len(s)] = s
    src_real = src != PAD
    enc_out = model.encode(src, src_real, srng=None)

    cap = max(max_decode_len(len(s), max_len_factor) for s in sources)
    emitted = np.full((b, 0), PAD, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    for _ in range(cap):
        dec_in = np.concatenate(
            [np.full((b, 1), BOS, dtype=np.int64), emitted], axis=1)
        tgt_real = np.ones_like(dec_in, dtype=bool)
        logits, _ = model.decode_forward(dec_in, tgt_real, enc_out, src_real, srng=None)
        lp = log_softmax_lastdim(Tensor(logits.data[:, -1, :])).data
        nxt = lp.argmax(axis=1).astype(np.int64)
        nxt[done] = EOS
        done |= nxt == EOS
        emitted = np.concatenate([emitted, nxt[:, None]], axis=1)
        if done.all():
            break

    out = []
    for i in range(b):
        row = emitted[i].tolist()
        hyp = []
        for v in row:
            if v == EOS:
                break
            hyp.append(v)
        out.append(hyp[: max_decode_len(len(sources[i]), max_len_factor)])
    return out


def r2l_greedy_decode(model, src_ids: list[int], alpha: float = DEFAULT_ALPHA,
                      max_len_factor: float = 2.0) -> list[int]:
    """Right-to-left decoding with the backward stack.

    The backward decoder's control token sits at the final position, so
    the total length must be fixed before any token is produced.  Every
    candidate length gets one right-to-left fill; the lengths then
    compete on length-normalized score.
    """
    if not src_ids:
        raise InputError("cannot decode an empty source")
    cap = max_decode_len(len(src_ids), max_len_factor)
    src = np.asarray([src_ids] * cap, dtype=np.int64)
    src_real = src != PAD
    enc_out = model.encode(src[:1], src_real[:1], srng=None)
    enc_out = Tensor(np.repeat(enc_out.data, cap, axis=0))

    # Row r holds the candidate of total length T = r + 1, right-aligned
    # bookkeeping: fill step k writes position T - 1 - k of every row that
    # still has one.  One batched decoder pass per fill step.
    dec_in = np.full((cap, cap), PAD, dtype=np.int64)
    tgt_real = np.zeros((cap, cap), dtype=bool)
    out = np.full((cap, cap), PAD, dtype=np.int64)
    scores = np.zeros(cap, dtype=np.float64)
    for r in range(cap):
        t_total = r + 1
        dec_in[r, t_total - 1] = R2L
        tgt_real[r, :t_total] = True
        out[r, t_total - 1] = EOS

    for k in range(cap):
        logits, _ = model.decode_backward(dec_in, tgt_real, enc_out, src_real, srng=None)
        for r in range(k, cap):
            i = r - k  # position T - 1 - k in row r
            lp = log_softmax_lastdim(Tensor(logits.data[r: r + 1, i, :])).data[0]
            if k == 0:
                scores[r] += float(lp[EOS])  # EOS pinned at the last slot, still scored
            else:
                v = int(np.argmax(lp))
                out[r, i] = v
                scores[r] += float(lp[v])
            if i - 1 >= 0:
                dec_in[r, i - 1] = out[r, i]

    norms = [scores[r] / length_penalty(r + 1, alpha) for r in range(cap)]
    best = int(np.argmax(norms))
    return out[best, :best].tolist()
