"""Scoring: corpus BLEU against a brute-force oracle, buckets, ablation grid."""

import math
from collections import Counter

import numpy as np
import pytest

from bidistill.errors import ConfigError, InputError
from bidistill.evaluation import (ABLATION_VARIANTS, bleu, bleu_by_length,
                                  format_ablation, token_accuracy,
                                  variant_settings)


def oracle_bleu(hyps, refs):
    """Independent reimplementation: explicit per-order loops, no shared code."""
    assert len(hyps) == len(refs)
    match, guess = [0] * 4, [0] * 4
    hyp_tokens = sum(len(h) for h in hyps)
    ref_tokens = sum(len(r) for r in refs)
    for hyp, ref in zip(hyps, refs):
        for order in (1, 2, 3, 4):
            ref_grams = Counter()
            for i in range(len(ref) - order + 1):
                ref_grams[tuple(ref[i: i + order])] += 1
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


class TestBleu:
    def test_identical_corpus_scores_hundred(self):
        sents = [list("abcde"), list("fg hij")]
        assert bleu(sents, sents) == pytest.approx(100.0, abs=1e-9)

    def test_missing_bigram_zeroes_score(self):
        assert bleu([["the", "the", "the"]], [["the", "cat"]]) == 0.0

    def test_partial_overlap_matches_oracle(self):
        hyps = [["a", "b", "c", "d", "e"], ["x", "y", "z", "w", "v", "u"]]
        refs = [["a", "b", "c", "d", "f"], ["x", "y", "z", "w", "u", "v"]]
        assert bleu(hyps, refs) == pytest.approx(oracle_bleu(hyps, refs), abs=1e-9)

    def test_brevity_penalty_applies_to_short_output(self):
        hyps = [["a", "b", "c", "d"]]
        refs = [["a", "b", "c", "d", "e", "f", "g", "h"]]
        assert bleu(hyps, refs) == pytest.approx(oracle_bleu(hyps, refs), abs=1e-9)
        assert bleu(hyps, refs) < 100.0 * math.exp(1.0 - 2.0) + 1e-9

    def test_random_corpora_match_oracle(self):
        rng = np.random.default_rng(40)
        for _ in range(10):
            n = int(rng.integers(1, 8))
            hyps, refs = [], []
            for _ in range(n):
                hyps.append(rng.integers(0, 6, size=rng.integers(4, 14)).tolist())
                refs.append(rng.integers(0, 6, size=rng.integers(4, 14)).tolist())
            assert bleu(hyps, refs) == pytest.approx(oracle_bleu(hyps, refs), abs=1e-9)

    def test_count_mismatch_rejected(self):
        with pytest.raises(InputError):
            bleu([["a"]], [["a"], ["b"]])

    def test_empty_corpus_rejected(self):
        with pytest.raises(InputError):
            bleu([], [])


class TestBuckets:
    def test_single_covering_bucket_equals_plain_bleu(self):
        hyps = [["a", "b", "c", "d", "e"], ["a", "c", "b", "e", "d"]]
        refs = [["a", "b", "c", "d", "e"], ["a", "b", "c", "e", "d"]]
        srcs = [["s"] * 3, ["s"] * 7]
        report = bleu_by_length(hyps, refs, srcs, bucket_edges=(1000,))
        assert report.buckets[0][1] == 2
        assert report.buckets[0][2] == pytest.approx(report.overall)
        assert report.overall == pytest.approx(bleu(hyps, refs))

    def test_default_edges_give_six_buckets(self):
        hyps = [[str(i)] * 4 for i in range(3)]
        refs = [[str(i)] * 4 for i in range(3)]
        srcs = [["s"] * 5, ["s"] * 15, ["s"] * 55]
        report = bleu_by_length(hyps, refs, srcs)
        assert len(report.buckets) == 6
        labels = [b[0] for b in report.buckets]
        assert labels == ["1-10", "11-20", "21-30", "31-40", "41-50", ">50"]
        counts = {label: n for label, n, _ in report.buckets}
        assert counts["1-10"] == 1 and counts["11-20"] == 1 and counts[">50"] == 1

    def test_empty_buckets_report_nan(self):
        report = bleu_by_length([["a"] * 5], [["a"] * 5], [["s"] * 5])
        empty = [b for b in report.buckets if b[1] == 0]
        assert empty and all(math.isnan(b[2]) for b in empty)
        assert "n/a" in report.format()

    def test_misaligned_inputs_rejected(self):
        with pytest.raises(InputError):
            bleu_by_length([["a"]], [["a"]], [])

    def test_unsorted_edges_rejected(self):
        with pytest.raises(InputError):
            bleu_by_length([["a"]], [["a"]], [["s"]], bucket_edges=(20, 10))


class TestTokenAccuracy:
    def test_exact_match_is_one(self):
        assert token_accuracy([[1, 2, 3]], [[1, 2, 3]]) == 1.0

    def test_partial_and_length_mismatch(self):
        # per-position matching; a short hypothesis forfeits the tail
        assert token_accuracy([[1, 9, 2]], [[1, 2, 3, 4]]) == 0.25
        assert token_accuracy([[1, 2]], [[1, 2, 3, 4]]) == 0.5

    def test_empty_references_rejected(self):
        with pytest.raises(InputError):
            token_accuracy([[]], [[]])


class TestAblationGrid:
    def test_exactly_seven_variants(self):
        assert len(ABLATION_VARIANTS) == 7
        assert ABLATION_VARIANTS[:4] == ("l2r", "r2l", "multitask", "sbd")

    def test_each_variant_yields_overrides(self):
        for name in ABLATION_VARIANTS:
            settings = variant_settings(name)
            assert "train.variant" in settings

    def test_removing_all_sbd_extras_degenerates_to_multitask(self):
        merged = {"train.variant": "sbd"}
        for name in ("sbd_no_anneal", "sbd_no_hidden", "sbd_no_logit"):
            for k, v in variant_settings(name).items():
                if k != "train.variant":
                    merged[k] = v
        assert merged == {"train.variant": "sbd", "loss.use_annealing": False,
                          "loss.use_hidden_kd": False, "loss.use_logit_kd": False}
        # with every extra off, the sbd objective is the plain two-decoder sum
        from bidistill.losses import joint_loss
        from bidistill.bpe import EOS
        from conftest import batch_from_pairs, micro_model
        m = micro_model(seed=41)
        batch = batch_from_pairs([([5, 6], [7, 8, EOS])])
        _, stripped = joint_loss(m, batch, variant="sbd", use_logit_kd=False,
                                 use_hidden_kd=False, use_annealing=False)
        _, multi = joint_loss(m, batch, variant="multitask")
        assert stripped.total == multi.total

    def test_unknown_variant_rejected(self):
        with pytest.raises(ConfigError):
            variant_settings("sbd_no_teacher")

    def test_format_has_header_and_seven_rows(self):
        rows = [(name, 1.0, 2.0) for name in ABLATION_VARIANTS]
        text = format_ablation(rows)
        lines = text.splitlines()
        assert lines[0].split("\t") == ["variant", "dev_bleu", "test_bleu"]
        assert len(lines) == 8
