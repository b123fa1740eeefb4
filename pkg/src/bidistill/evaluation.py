"""Corpus BLEU, length-bucketed reporting, and the variant ablation grid."""

from __future__ import annotations

import math
import sys
from collections import Counter
from dataclasses import dataclass, field

from .errors import ConfigError, InputError

MAX_ORDER = 4
DEFAULT_BUCKET_EDGES = (10, 20, 30, 40, 50)

ABLATION_VARIANTS = ("l2r", "r2l", "multitask", "sbd",
                     "sbd_no_anneal", "sbd_no_hidden", "sbd_no_logit")


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def bleu(hyps: list[list], refs: list[list]) -> float:
    """Corpus BLEU in percent: 4-gram clipped precision, brevity penalty,
    no smoothing.  Any empty n-gram precision zeroes the score."""
    if len(hyps) != len(refs):
        raise InputError(f"hypothesis/reference count mismatch: {len(hyps)} vs {len(refs)}")
    if not hyps:
        raise InputError("cannot score an empty corpus")
    clipped = [0] * MAX_ORDER
    total = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            h_counts = _ngrams(hyp, n)
            r_counts = _ngrams(ref, n)
            total[n - 1] += max(len(hyp) - n + 1, 0)
            clipped[n - 1] += sum(min(c, r_counts[g]) for g, c in h_counts.items())
    if hyp_len == 0 or any(t == 0 for t in total) or any(c == 0 for c in clipped):
        return 0.0
    log_prec = sum(math.log(c / t) for c, t in zip(clipped, total)) / MAX_ORDER
    bp = min(1.0, math.exp(1.0 - ref_len / hyp_len))
    return 100.0 * bp * math.exp(log_prec)


@dataclass
class BleuReport:
    overall: float
    buckets: list[tuple[str, int, float]] = field(default_factory=list)
    # each bucket: (label, sentence count, bleu; nan when the bucket is empty)

    def format(self) -> str:
        lines = [f"BLEU = {self.overall:.2f}"]
        for label, count, score in self.buckets:
            shown = "n/a" if math.isnan(score) else f"{score:.2f}"
            lines.append(f"  src len {label:>6}: n={count:<5d} BLEU = {shown}")
        return "\n".join(lines)


def bleu_by_length(hyps: list[list], refs: list[list], srcs: list[list],
                   bucket_edges=DEFAULT_BUCKET_EDGES) -> BleuReport:
    """Overall BLEU plus per-bucket BLEU, bucketed by source length."""
    if not (len(hyps) == len(refs) == len(srcs)):
        raise InputError("hyps, refs, and srcs must align one to one")
    edges = list(bucket_edges)
    if edges != sorted(edges) or len(set(edges)) != len(edges):
        raise InputError(f"bucket edges must be strictly increasing, got {bucket_edges}")
    labels = []
    lo = 1
    for e in edges:
        labels.append(f"{lo}-{e}")
        lo = e + 1
    labels.append(f">{edges[-1]}")

    groups: list[tuple[list, list]] = [([], []) for _ in labels]
    for hyp, ref, src in zip(hyps, refs, srcs):
        idx = len(edges)
        for i, e in enumerate(edges):
            if len(src) <= e:
                idx = i
                break
        groups[idx][0].append(hyp)
        groups[idx][1].append(ref)

    buckets = []
    for label, (g_hyps, g_refs) in zip(labels, groups):
        score = bleu(g_hyps, g_refs) if g_hyps else float("nan")
        buckets.append((label, len(g_hyps), score))
    return BleuReport(overall=bleu(hyps, refs), buckets=buckets)


def token_accuracy(hyps: list[list], refs: list[list]) -> float:
    """Fraction of reference positions the hypothesis matches exactly."""
    if len(hyps) != len(refs):
        raise InputError(f"hypothesis/reference count mismatch: {len(hyps)} vs {len(refs)}")
    total = sum(len(r) for r in refs)
    if total == 0:
        raise InputError("references contain no tokens")
    hit = 0
    for hyp, ref in zip(hyps, refs):
        hit += sum(1 for h, r in zip(hyp, ref) if h == r)
    return hit / total


def variant_settings(name: str) -> dict:
    """Config overrides that realize one ablation row."""
    if name not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown ablation variant {name!r}")
    if name in ("l2r", "r2l", "multitask", "sbd"):
        return {"train.variant": name}
    base = {"train.variant": "sbd"}
    if name == "sbd_no_anneal":
        base["loss.use_annealing"] = False
    elif name == "sbd_no_hidden":
        base["loss.use_hidden_kd"] = False
    else:
        base["loss.use_logit_kd"] = False
    return base


def run_ablation(cfg, out_dir: str, variants=ABLATION_VARIANTS, log=sys.stderr) -> list[tuple[str, float, float]]:
    """Train every variant from the same config and score dev and test.

    Returns (variant, dev_bleu, test_bleu) rows.  All rows share data,
    seeds, and budget; only the objective and the decoding stack differ.
    The pure right-to-left row decodes with the backward stack; every
    other row decodes with the forward stack under beam search.
    """
    from . import training  # deferred: training imports this module for BLEU
    from .inference import beam_search, r2l_greedy_decode

    rows = []
    for name in variants:
        run_cfg = cfg.replace(**variant_settings(name))
        run_dir = f"{out_dir}/{name}"
        print(f"[ablate] training {name}", file=log, flush=True)
        result = training.train(run_cfg, run_dir, log=log)
        model = result.model
        test = result.data.test
        srcs = [p[0] for p in test.pairs]
        refs = [p[1][:-1] for p in test.pairs]
        if name == "r2l":
            hyps = [r2l_greedy_decode(model, s, alpha=run_cfg.decode.alpha,
                                      max_len_factor=run_cfg.decode.max_len_factor)
                    for s in srcs]
        else:
            hyps = [beam_search(model, s, beam=run_cfg.decode.beam,
                                alpha=run_cfg.decode.alpha,
                                max_len_factor=run_cfg.decode.max_len_factor).ids
                    for s in srcs]
        test_bleu = bleu(hyps, refs)
        rows.append((name, result.dev_bleu_final, test_bleu))
        print(f"[ablate] {name}: dev {result.dev_bleu_final:.2f} test {test_bleu:.2f}",
              file=log, flush=True)
    return rows


def format_ablation(rows: list[tuple[str, float, float]]) -> str:
    lines = ["variant\tdev_bleu\ttest_bleu"]
    for name, dev, test in rows:
        lines.append(f"{name}\t{dev:.2f}\t{test:.2f}")
    return "\n".join(lines)
