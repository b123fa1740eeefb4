"""Command line entry point.

Payload goes to stdout; progress and diagnostics go to stderr.  Exit
codes: 0 success, 1 bad usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bpe as bpe_mod
from .checkpoint import average_checkpoints, load_checkpoint, load_into_model, save_checkpoint
from .config import KEYS, Config
from .data import gen_synthetic, write_corpus_text
from .errors import ConfigError, InputError
from .evaluation import ABLATION_VARIANTS, bleu_by_length, format_ablation, run_ablation
from .inference import beam_search, r2l_greedy_decode
from .model import ModelConfig, SBDModel
from .training import build_data, format_sweep, sweep_wstep, train


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # the dotted config flags are long and similar; a typo'd prefix must
    # fail loudly, not silently match the nearest full flag
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise _UsageError(message)


def _add_config_flags(parser: _Parser) -> None:
    parser.add_argument("--config", metavar="FILE", help="config file; defaults apply if omitted")
    group = parser.add_argument_group("config overrides (highest precedence)")
    for key in KEYS:
        group.add_argument(f"--{key}", metavar="V", dest=key)


def _resolve_config(ns: argparse.Namespace) -> Config:
    cfg = Config.from_file(ns.config) if ns.config else Config()
    pairs = {key: getattr(ns, key) for key in KEYS if getattr(ns, key, None) is not None}
    return cfg.apply_overrides(pairs)


def _build_parser() -> _Parser:
    parser = _Parser(prog="bidistill",
                     description="Train and run twin-decoder translation models.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("learn-bpe", help="learn a subword model from raw text")
    p.add_argument("--input", required=True)
    p.add_argument("--merges-out", required=True)
    p.add_argument("--vocab-out", required=True)
    p.add_argument("--num-merges", type=int, default=200)

    p = sub.add_parser("gen-data", help="write a synthetic parallel corpus as text")
    p.add_argument("--task", required=True, choices=("copy", "reverse", "agree"))
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-dev", type=int, default=64)
    p.add_argument("--n-test", type=int, default=64)
    p.add_argument("--max-len", type=int, default=12)
    p.add_argument("--min-len", type=int, default=2)
    p.add_argument("--vocab-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=1)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--out", required=True, metavar="DIR")
    _add_config_flags(p)

    p = sub.add_parser("translate", help="decode text with a trained model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--src", default="-", help="source file, or - for stdin")
    p.add_argument("--output", default="-", help="hypothesis file, or - for stdout")
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="score hypotheses against references")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--src", help="source file; enables per-length buckets")
    p.add_argument("--edges", default="10,20,30,40,50",
                   help="comma-separated bucket edges for --src")

    p = sub.add_parser("ablate", help="train and score every variant")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--variants", default="all",
                   help="'all' or comma-separated subset of the seven variants")
    _add_config_flags(p)

    p = sub.add_parser("sweep-wstep", help="compare teacher-decay knees")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--candidates", required=True,
                   help="comma-separated w_step values, e.g. 250,500,1000")
    _add_config_flags(p)

    p = sub.add_parser("avg-ckpt", help="average checkpoints into one")
    p.add_argument("--out", required=True)
    p.add_argument("inputs", nargs="+")

    return parser


def _read_lines(path: str) -> list[str]:
    if path == "-":
        return sys.stdin.read().splitlines()
    with open(path, encoding="utf-8") as f:
        return f.read().splitlines()


def _ids_from_line(line: str) -> list[int]:
    ids = []
    for tok in line.split():
        if not tok.startswith("w") or not tok[1:].isdigit():
            raise InputError(f"expected id tokens like 'w7', got {tok!r}")
        ids.append(int(tok[1:]))
    return ids


def _cmd_learn_bpe(ns) -> int:
    with open(ns.input, encoding="utf-8") as f:
        corpus = f.read().splitlines()
    model = bpe_mod.bpe_learn(corpus, ns.num_merges)
    bpe_mod.save_model(model, ns.merges_out, ns.vocab_out)
    print(f"[learn-bpe] {len(model.merges)} merges, vocab {model.size}",
          file=sys.stderr)
    return 0


def _cmd_gen_data(ns) -> int:
    os.makedirs(ns.out_dir, exist_ok=True)
    for split, n, seed in (("train", ns.n_train, ns.seed),
                           ("dev", ns.n_dev, ns.seed + 1),
                           ("test", ns.n_test, ns.seed + 2)):
        corpus = gen_synthetic(ns.task, n, ns.max_len, ns.vocab_size, seed,
                               min_len=ns.min_len)
        write_corpus_text(corpus, os.path.join(ns.out_dir, f"{split}.src"),
                          os.path.join(ns.out_dir, f"{split}.tgt"))
        print(f"[gen-data] {split}: {len(corpus)} pairs", file=sys.stderr)
    return 0


def _cmd_train(ns) -> int:
    cfg = _resolve_config(ns)
    result = train(cfg, ns.out)
    # strict JSON: no dev split surfaces as null, not NaN
    dev = result.dev_bleu_final
    payload = {"steps": result.steps,
               "dev_bleu": dev if dev == dev else None,
               "avg_ckpt": result.avg_path, "stopped_early": result.stopped_early}
    print(json.dumps(payload))
    return 0


def _load_model_for_ckpt(cfg: Config, ckpt_path: str):
    """Rebuild a model around a checkpoint: decoder allocation and
    embedding sharing come from the stored names, shapes from cfg."""
    tensors = load_checkpoint(ckpt_path)
    with_fwd = any(n.startswith("dec_fwd.") for n in tensors)
    with_bwd = any(n.startswith("dec_bwd.") for n in tensors)
    shared = "emb.tgt" in tensors
    src_vocab = tensors["emb.src"].shape[0]
    any_emb = "emb.tgt" if shared else ("emb.tgt_fwd" if with_fwd else "emb.tgt_bwd")
    tgt_vocab = tensors[any_emb].shape[0]
    mcfg = ModelConfig(
        d_model=cfg.model.d_model, heads=cfg.model.heads, layers=cfg.model.layers,
        d_ffn=cfg.model.d_ffn, dropout=cfg.model.dropout, max_pos=cfg.model.max_pos,
        src_vocab=int(src_vocab), tgt_vocab=int(tgt_vocab),
        share_target_embedding=shared, with_fwd=with_fwd, with_bwd=with_bwd)
    model = SBDModel(mcfg, seed=0)
    load_into_model(model, ckpt_path)
    return model


def _cmd_translate(ns) -> int:
    cfg = _resolve_config(ns)
    model = _load_model_for_ckpt(cfg, ns.ckpt)
    id_mode = bool(cfg.data.task) or not cfg.data.src_bpe_merges
    if id_mode:
        enc = _ids_from_line
        dec = lambda ids: " ".join(f"w{t}" for t in ids)
    else:
        bpe_src = bpe_mod.load_model(cfg.data.src_bpe_merges, cfg.data.src_bpe_vocab)
        if cfg.data.joint_vocab or not cfg.data.tgt_bpe_merges:
            bpe_tgt = bpe_src
        else:
            bpe_tgt = bpe_mod.load_model(cfg.data.tgt_bpe_merges, cfg.data.tgt_bpe_vocab)
        enc = lambda line: bpe_mod.encode(bpe_src, line)
        dec = lambda ids: bpe_mod.decode(bpe_tgt, ids)

    lines = _read_lines(ns.src)
    out_lines = []
    for line in lines:
        src = enc(line)
        if model.cfg.with_fwd:
            hyp = beam_search(model, src, beam=cfg.decode.beam, alpha=cfg.decode.alpha,
                              max_len_factor=cfg.decode.max_len_factor).ids
        else:
            hyp = r2l_greedy_decode(model, src, alpha=cfg.decode.alpha,
                                    max_len_factor=cfg.decode.max_len_factor)
        out_lines.append(dec(hyp))
    text = "\n".join(out_lines) + ("\n" if out_lines else "")
    if ns.output == "-":
        sys.stdout.write(text)
    else:
        with open(ns.output, "w", encoding="utf-8") as f:
            f.write(text)
    return 0


def _cmd_evaluate(ns) -> int:
    hyps = [line.split() for line in _read_lines(ns.hyp)]
    refs = [line.split() for line in _read_lines(ns.ref)]
    if ns.src:
        srcs = [line.split() for line in _read_lines(ns.src)]
        edges = tuple(int(e) for e in ns.edges.split(","))
        report = bleu_by_length(hyps, refs, srcs, bucket_edges=edges)
        print(report.format())
    else:
        from .evaluation import bleu
        print(f"BLEU = {bleu(hyps, refs):.2f}")
    return 0


def _cmd_ablate(ns) -> int:
    cfg = _resolve_config(ns)
    if ns.variants.strip() == "all":
        variants = ABLATION_VARIANTS
    else:
        variants = tuple(v.strip() for v in ns.variants.split(",") if v.strip())
    rows = run_ablation(cfg, ns.out, variants=variants)
    print(format_ablation(rows))
    return 0


def _cmd_sweep(ns) -> int:
    cfg = _resolve_config(ns)
    try:
        candidates = [int(c) for c in ns.candidates.split(",") if c.strip()]
    except ValueError:
        raise InputError(f"bad --candidates value {ns.candidates!r}") from None
    rows = sweep_wstep(cfg, ns.out, candidates)
    print(format_sweep(rows))
    return 0


def _cmd_avg_ckpt(ns) -> int:
    avg = average_checkpoints(ns.inputs)
    save_checkpoint(ns.out, avg)
    print(f"[avg-ckpt] averaged {len(ns.inputs)} checkpoints into {ns.out}",
          file=sys.stderr)
    return 0


_COMMANDS = {
    "learn-bpe": _cmd_learn_bpe,
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "translate": _cmd_translate,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
    "sweep-wstep": _cmd_sweep,
    "avg-ckpt": _cmd_avg_ckpt,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
    except _UsageError:
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        return _COMMANDS[ns.command](ns)
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
