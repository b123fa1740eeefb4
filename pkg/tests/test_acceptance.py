"""Acceptance gate: one test per shipping criterion, run with -v for a
one-line verdict each.  Tolerances and budgets are pinned here and must
not be loosened; a red line means the property does not hold."""

import json
import math
import os
import sys
import time
from collections import Counter

import numpy as np
import pytest

from bidistill.bpe import EOS, bpe_learn, decode as bpe_decode, encode as bpe_encode
from bidistill.checkpoint import (average_checkpoints, load_checkpoint,
                                  save_checkpoint)
from bidistill.config import Config
from bidistill.errors import ContractError
from bidistill.evaluation import (ABLATION_VARIANTS, bleu, bleu_by_length,
                                  format_ablation, run_ablation,
                                  token_accuracy)
from bidistill.inference import (beam_search, greedy_decode,
                                 greedy_decode_batch, length_penalty)
from bidistill.losses import (hidden_kd_loss, joint_loss, lambda_schedule,
                              logit_kd_loss)
from bidistill.model import causal_mask_backward, causal_mask_forward
from bidistill.tensor import Tensor, grad_check
from bidistill.training import train
from conftest import batch_from_pairs, micro_model


def test_criterion_1_gradient_integrity_of_the_joint_loss():
    """Full joint loss (mid-anneal, both distillation terms) agrees with
    central differences on every parameter of a micro twin-decoder model."""
    model = micro_model(seed=5, d_model=8, heads=2, layers=1, d_ffn=16,
                        src_vocab=11, tgt_vocab=11)
    params = model.parameters()
    for p in params.values():
        p.data = p.data.astype(np.float64)
    # two pairs, both targets exactly five tokens, so nothing is padding
    batch = batch_from_pairs([([5, 6, 7], [6, 7, 8, 9, EOS]),
                              ([8, 9, 10, 5], [10, 9, 8, 7, EOS])])
    assert batch.tgt_out.shape[1] == 5

    def f(_):
        total, _parts = joint_loss(model, batch, variant="sbd", eps_ls=0.1,
                                   step=2000, w_step=1000, srng=None)
        return total

    start = time.time()
    worst = grad_check(f, params.values(), eps=1e-5)
    elapsed = time.time() - start
    assert worst < 1e-4, f"max relative gradient error {worst:.3e}"
    assert elapsed < 60.0, f"grad check took {elapsed:.1f}s"


def test_criterion_2_mask_causality_and_duality():
    """Perturbing a decoder input token never changes logits on the token's
    blind side, bitwise; the two masks are transposes for every length."""
    model = micro_model(seed=7)
    rng = np.random.default_rng(2024)
    ones = lambda t: np.ones((1, t), dtype=bool)
    for _ in range(100):
        t_len = int(rng.integers(2, 9))
        src = rng.integers(5, 12, size=(1, int(rng.integers(1, 7))))
        src_mask = ones(src.shape[1])
        enc_out = model.encode(src, src_mask, None)
        dec_in = rng.integers(5, 12, size=(1, t_len))
        tp = int(rng.integers(0, t_len))
        bumped = dec_in.copy()
        bumped[0, tp] = 5 + (bumped[0, tp] - 5 + 1) % 7

        base_f, _ = model.decode_forward(dec_in, ones(t_len), enc_out, src_mask, None)
        pert_f, _ = model.decode_forward(bumped, ones(t_len), enc_out, src_mask, None)
        assert np.array_equal(base_f.data[0, :tp], pert_f.data[0, :tp])

        base_b, _ = model.decode_backward(dec_in, ones(t_len), enc_out, src_mask, None)
        pert_b, _ = model.decode_backward(bumped, ones(t_len), enc_out, src_mask, None)
        assert np.array_equal(base_b.data[0, tp + 1:], pert_b.data[0, tp + 1:])

    for t in range(1, 65):
        assert np.array_equal(causal_mask_backward(t), causal_mask_forward(t).T)


def test_criterion_3_teacher_annealing_schedule():
    """lambda = min(1, w/step): pinned points, distillation weight zero
    through the teacher phase, peak 1/4 at twice the knee, then strictly
    decreasing; at lambda = 1 the joint loss IS the backward loss."""
    w = 1000
    for step, want in ((1, 1.0), (w - 1, 1.0), (w, 1.0),
                       (w + 1, w / (w + 1)), (2 * w, 0.5), (10 * w, 0.1)):
        assert lambda_schedule(step, w) == pytest.approx(want, rel=1e-12)

    def kd_coeff(step):
        lam = lambda_schedule(step, w)
        return (1.0 - lam) * lam

    for step in range(1, w + 1):
        assert kd_coeff(step) == 0.0
    assert kd_coeff(2 * w) == pytest.approx(0.25, rel=1e-12)
    grid = [kd_coeff(c) for c in range(2 * w, 10 * w + 1)]
    assert all(a > b for a, b in zip(grid, grid[1:]))

    model = micro_model(seed=3)
    batch = batch_from_pairs([([5, 6], [7, 8, EOS])])
    total, parts = joint_loss(model, batch, variant="sbd", step=50, w_step=w)
    assert parts.lam == 1.0
    assert total.item() == parts.ce_bwd
    assert parts.total == parts.ce_bwd


def test_criterion_4_distillation_loss_properties():
    """Logit KD is a KL: nonnegative everywhere, zero on identical logits;
    hidden KD is zero on an exact projection match; both hand oracles hold."""
    rng = np.random.default_rng(17)
    mask = np.ones((2, 3), dtype=bool)
    for _ in range(1000):
        a = Tensor(rng.normal(size=(2, 3, 7)).astype(np.float32))
        b = Tensor(rng.normal(size=(2, 3, 7)).astype(np.float32))
        assert logit_kd_loss(a, b, mask).item() >= 0.0
    same = Tensor(rng.normal(size=(2, 3, 7)).astype(np.float32))
    assert logit_kd_loss(same, same, mask).item() == 0.0

    h = Tensor(rng.normal(size=(2, 3, 5)).astype(np.float32))
    assert hidden_kd_loss(h, Tensor(h.data.copy()), mask).item() == 0.0

    one = np.ones((1, 1), dtype=bool)
    fwd = Tensor(np.array([[[0.0, math.log(3.0)]]]))
    bwd = Tensor(np.array([[[0.0, 0.0]]]))
    want_kl = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
    assert logit_kd_loss(fwd, bwd, one).item() == pytest.approx(want_kl, abs=1e-6)
    assert want_kl == pytest.approx(0.14384, abs=1e-4)

    proj = Tensor(np.array([[[1.0, 2.0]]]))
    target = Tensor(np.array([[[1.0, 4.0]]]))
    assert hidden_kd_loss(proj, target, one).item() == pytest.approx(2.0, abs=1e-6)


COPY_RECIPE = {
    "data.task": "copy", "data.vocab_size": 16, "data.max_len": 12, "data.min_len": 2,
    "data.n_train": 4000, "data.n_dev": 64, "data.n_test": 128,
    "model.d_model": 64, "model.heads": 4, "model.layers": 2, "model.d_ffn": 256,
    "optim.max_steps": 3000, "optim.ckpt_every": 1500, "optim.log_every": 500,
    "optim.tokens_per_batch": 384, "optim.warmup": 300, "optim.seed": 1,
    "optim.avg_last_k": 3, "loss.w_step": 300,
}


def _held_out_accuracy(result):
    test = result.data.test
    srcs = [p[0] for p in test.pairs]
    refs = [p[1][:-1] for p in test.pairs]
    hyps = greedy_decode_batch(result.model, srcs)
    return token_accuracy(hyps, refs)


def test_criterion_5_copy_task_learned_by_baseline_and_full_model(tmp_path):
    """Both the forward-only baseline and the full twin-decoder recipe
    reach 99% greedy token accuracy on held-out copy data in budget."""
    for variant in ("l2r", "sbd"):
        cfg = Config().replace(**COPY_RECIPE, **{"train.variant": variant})
        start = time.time()
        result = train(cfg, str(tmp_path / variant), log=open(os.devnull, "w"))
        elapsed = time.time() - start
        acc = _held_out_accuracy(result)
        assert acc >= 0.99, f"{variant}: held-out token accuracy {acc:.4f}"
        assert elapsed < 600.0, f"{variant}: took {elapsed:.0f}s"


AGREE_RECIPE = {
    "data.task": "agree", "data.vocab_size": 16, "data.min_len": 8, "data.max_len": 24,
    "data.n_train": 3000, "data.n_dev": 96, "data.n_test": 0,
    "model.d_model": 32, "model.heads": 2, "model.layers": 1, "model.d_ffn": 64,
    "optim.max_steps": 1200, "optim.ckpt_every": 200, "optim.log_every": 400,
    "optim.tokens_per_batch": 512, "optim.warmup": 80,
    "optim.avg_last_k": 2, "loss.w_step": 150,
}


def test_criterion_6_backward_distillation_helps_long_range_agreement(tmp_path):
    """Across 3 seeds on the agreement task, the full recipe's mean dev BLEU
    is at least the forward-only baseline's.  The per-length gap pattern
    (larger improvement on longer sources) is reported, not asserted."""
    edges = (12, 18)
    scores = {"l2r": [], "sbd": []}
    bucket_scores = {}
    for variant in ("l2r", "sbd"):
        for seed in (1, 2, 3):
            cfg = Config().replace(**AGREE_RECIPE, **{"train.variant": variant,
                                                      "optim.seed": seed})
            result = train(cfg, str(tmp_path / f"{variant}_{seed}"),
                           log=open(os.devnull, "w"))
            scores[variant].append(result.dev_bleu_final)
            dev = result.data.dev
            srcs = [p[0] for p in dev.pairs]
            refs = [p[1][:-1] for p in dev.pairs]
            hyps = greedy_decode_batch(result.model, srcs)
            report = bleu_by_length(hyps, refs, srcs, bucket_edges=edges)
            bucket_scores[(variant, seed)] = [b[2] for b in report.buckets]

    mean_l2r = sum(scores["l2r"]) / 3.0
    mean_sbd = sum(scores["sbd"]) / 3.0

    wins = 0
    lines = [f"[criterion 6] mean dev BLEU: sbd {mean_sbd:.2f} vs l2r {mean_l2r:.2f}"]
    for seed in (1, 2, 3):
        gap_short = bucket_scores[("sbd", seed)][0] - bucket_scores[("l2r", seed)][0]
        gap_long = bucket_scores[("sbd", seed)][-1] - bucket_scores[("l2r", seed)][-1]
        wins += gap_long >= gap_short
        lines.append(f"[criterion 6] seed {seed}: gap shortest {gap_short:+.2f},"
                     f" longest {gap_long:+.2f}")
    lines.append(f"[criterion 6] longest-bucket gap >= shortest in {wins}/3 seeds"
                 " (reported, not asserted)")
    print("\n".join(lines), file=sys.__stderr__, flush=True)

    assert mean_sbd >= mean_l2r, f"mean dev BLEU sbd {mean_sbd:.2f} < l2r {mean_l2r:.2f}"


def _oracle_bleu(hyps, refs):
    match, guess = [0] * 4, [0] * 4
    hyp_tokens = sum(len(h) for h in hyps)
    ref_tokens = sum(len(r) for r in refs)
    for hyp, ref in zip(hyps, refs):
        for order in (1, 2, 3, 4):
            ref_grams = Counter(tuple(ref[i: i + order])
                                for i in range(len(ref) - order + 1))
            seen = Counter()
            for i in range(len(hyp) - order + 1):
                g = tuple(hyp[i: i + order])
                guess[order - 1] += 1
                seen[g] += 1
                if seen[g] <= ref_grams[g]:
                    match[order - 1] += 1
    if hyp_tokens == 0 or 0 in guess or 0 in match:
        return 0.0
    geo = math.exp(sum(math.log(m / g) for m, g in zip(match, guess)) / 4.0)
    bp = 1.0 if hyp_tokens > ref_tokens else math.exp(1.0 - ref_tokens / hyp_tokens)
    return 100.0 * bp * geo


def test_criterion_7_bleu_agrees_with_brute_force_oracle():
    """Corpus BLEU equals an independent n-gram-counting oracle on random
    mini-corpora and honors the two degenerate cases."""
    rng = np.random.default_rng(99)
    vocab = list("abcdef")
    for _ in range(20):
        n = int(rng.integers(1, 11))
        hyps, refs = [], []
        for _ in range(n):
            hyps.append([vocab[i] for i in rng.integers(0, 6, size=rng.integers(1, 16))])
            refs.append([vocab[i] for i in rng.integers(0, 6, size=rng.integers(1, 16))])
        assert bleu(hyps, refs) == pytest.approx(_oracle_bleu(hyps, refs), abs=1e-9)

    sents = [list("abcdefg"), list("hijkl")]
    assert bleu(sents, sents) == pytest.approx(100.0, abs=1e-9)
    assert bleu([["the", "the", "the"]], [["the", "cat"]]) == 0.0


class _TableModel:
    """Search stub whose next-token distribution is a prefix table."""

    def __init__(self, table):
        self.vocab = 8
        self.table = {k: self._row(v) for k, v in table.items()}
        self.bwd_calls = 0

    def _row(self, probs):
        row = np.full(self.vocab, -1e9, dtype=np.float64)
        for tok, lp in probs.items():
            row[tok] = lp
        return row

    def init_decode(self, src_ids):
        return {}

    def next_logprobs(self, state, rows):
        eos_row = self._row({EOS: 0.0})
        return np.stack([self.table.get(tuple(r.tolist()), eos_row) for r in rows])


def _enumerate_best(model, cap, alpha):
    results = []

    def walk(prefix, score):
        row = model.table.get(tuple(prefix))
        if row is None:
            row = model._row({EOS: 0.0})
        for tok in range(model.vocab):
            lp = float(row[tok])
            if lp <= -5e8:
                continue
            if tok == EOS:
                results.append((score + lp, list(prefix), len(prefix) + 1))
            elif len(prefix) + 1 <= cap:
                walk(prefix + [tok], score + lp)

    walk([], 0.0)
    scored = [(s / length_penalty(e, alpha), ids) for s, ids, e in results]
    scored.sort(key=lambda t: (-t[0], tuple(t[1])))
    return scored[0]


def test_criterion_8_beam_search_contracts():
    """Beam width 1 reproduces greedy decoding on random models; a two-step
    toy search matches exhaustive enumeration; forward-only translation
    never touches the backward decoder."""
    for seed in range(50):
        model = micro_model(seed=100 + seed)
        rng = np.random.default_rng(seed)
        src = rng.integers(5, 12, size=int(rng.integers(1, 7))).tolist()
        hyp = beam_search(model, src, beam=1, alpha=0.6)
        assert hyp.ids == greedy_decode(model, src)

    lg = math.log
    table = {
        (): {5: lg(0.4), 6: lg(0.35), EOS: lg(0.25)},
        (5,): {5: lg(0.1), 6: lg(0.5), EOS: lg(0.4)},
        (6,): {5: lg(0.45), 6: lg(0.1), EOS: lg(0.45)},
        (5, 5): {EOS: 0.0}, (5, 6): {EOS: 0.0},
        (6, 5): {EOS: 0.0}, (6, 6): {EOS: 0.0},
    }
    stub = _TableModel(table)
    for alpha in (0.0, 0.6, 1.0):
        want_norm, want_ids = _enumerate_best(stub, cap=4, alpha=alpha)
        got = beam_search(stub, [5], beam=16, alpha=alpha, max_len_factor=1.0)
        assert got.ids == want_ids
        assert got.norm_score == pytest.approx(want_norm, rel=1e-9)

    model = micro_model(seed=11)
    rng = np.random.default_rng(11)
    for _ in range(10):
        src = rng.integers(5, 12, size=int(rng.integers(2, 7))).tolist()
        beam_search(model, src, beam=4, alpha=0.6)
    assert model.bwd_calls == 0


TINY_RECIPE = {
    "data.task": "copy", "data.vocab_size": 12, "data.n_train": 64,
    "data.n_dev": 8, "data.n_test": 8, "data.max_len": 5,
    "model.d_model": 16, "model.heads": 2, "model.layers": 1, "model.d_ffn": 32,
    "optim.max_steps": 12, "optim.ckpt_every": 6, "optim.log_every": 4,
    "optim.tokens_per_batch": 60, "optim.warmup": 10, "optim.avg_last_k": 2,
    "optim.seed": 3, "loss.w_step": 5,
}


def test_criterion_9_reproducibility_and_plumbing(tmp_path):
    """Same config and seed twice gives byte-identical artifacts; checkpoint
    save/load/save and averaging are exact; subword coding round-trips;
    the ablation grid has exactly its seven rows."""
    cfg = Config().replace(**TINY_RECIPE)
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        train(cfg, str(out), log=open(os.devnull, "w"))
        runs.append(out)
    for fname in ("ckpt_000006.bin", "ckpt_000012.bin", "ckpt_avg.bin", "metrics.jsonl"):
        assert (runs[0] / fname).read_bytes() == (runs[1] / fname).read_bytes()

    first = str(runs[0] / "ckpt_avg.bin")
    relay = str(tmp_path / "relay.bin")
    save_checkpoint(relay, load_checkpoint(first))
    assert open(relay, "rb").read() == open(first, "rb").read()

    avg = average_checkpoints([first, first, first])
    orig = load_checkpoint(first)
    assert set(avg) == set(orig)
    for name in orig:
        assert np.array_equal(avg[name], orig[name])

    rng = np.random.default_rng(77)
    words = ["abc", "bcd", "cde", "ab", "de", "ea"]
    lines = [" ".join(words[i] for i in rng.integers(0, 6, size=rng.integers(1, 7)))
             for _ in range(1000)]
    bpe = bpe_learn(lines, 40)
    for line in lines:
        assert bpe_decode(bpe, bpe_encode(bpe, line)) == line

    rows = run_ablation(cfg, str(tmp_path / "ablate"),
                        variants=ABLATION_VARIANTS, log=open(os.devnull, "w"))
    assert len(rows) == 7
    assert tuple(r[0] for r in rows) == ABLATION_VARIANTS
    assert len(format_ablation(rows).splitlines()) == 8
