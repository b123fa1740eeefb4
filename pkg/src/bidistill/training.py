"""Optimization: warmup-decay learning rate, Adam, clipping, the step
loop, checkpoint averaging, and the teacher-weight sweep.

Every step takes exactly one optimizer update covering all parameters,
whatever mixture of objectives contributed gradient that step.
"""

from __future__ import annotations

import json
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import bpe as bpe_mod
from .checkpoint import average_checkpoints, load_into_model, model_state, save_checkpoint
from .data import ParallelCorpus, gen_synthetic, load_parallel, make_batches
from .errors import ConfigError, ContractError, NumericError
from .evaluation import bleu
from .inference import greedy_decode_batch, r2l_greedy_decode
from .losses import VARIANTS, joint_loss
from .model import ModelConfig, SBDModel, StepRNG
from .tensor import Tensor, backward


def noam_lr(step: int, d_model: int, warmup: int) -> float:
    """Inverse-sqrt schedule with linear warmup, scaled by model width."""
    if warmup < 1:
        raise ConfigError(f"warmup must be positive, got {warmup}")
    if step < 1:
        raise ContractError(f"step must be positive, got {step}")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class Adam:
    """Adam with bias correction; moments follow parameter dtype."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.98, eps: float = 1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= np.float32(lr) * update.astype(np.float32)


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad.astype(np.float64))))
    norm = math.sqrt(total)
    if max_norm > 0.0 and norm > max_norm:
        scale = np.float32(max_norm / norm)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


@dataclass
class DataBundle:
    train: ParallelCorpus
    dev: ParallelCorpus | None
    test: ParallelCorpus | None
    src_vocab: int
    tgt_vocab: int
    bpe_src: bpe_mod.BPEModel | None = None
    bpe_tgt: bpe_mod.BPEModel | None = None


def build_data(cfg) -> DataBundle:
    """Synthetic mode when data.task is set; otherwise encoded text files."""
    if cfg.data.task:
        mk = lambda n, s: gen_synthetic(cfg.data.task, n, cfg.data.max_len,
                                        cfg.data.vocab_size, s, min_len=cfg.data.min_len)
        seed = cfg.optim.seed
        return DataBundle(
            train=mk(cfg.data.n_train, seed),
            dev=mk(cfg.data.n_dev, seed + 1) if cfg.data.n_dev > 0 else None,
            test=mk(cfg.data.n_test, seed + 2) if cfg.data.n_test > 0 else None,
            src_vocab=cfg.data.vocab_size, tgt_vocab=cfg.data.vocab_size)

    if not cfg.data.src_bpe_merges:
        raise ConfigError("text mode needs data.src_bpe_merges (or set data.task)")
    bpe_src = bpe_mod.load_model(cfg.data.src_bpe_merges, cfg.data.src_bpe_vocab)
    if cfg.data.joint_vocab or not cfg.data.tgt_bpe_merges:
        bpe_tgt = bpe_src
    else:
        bpe_tgt = bpe_mod.load_model(cfg.data.tgt_bpe_merges, cfg.data.tgt_bpe_vocab)

    def load(src_path, tgt_path):
        if not src_path:
            return None
        return load_parallel(src_path, tgt_path, bpe_src, bpe_tgt,
                             max_tokens_per_example=cfg.data.max_example_tokens)

    train = load(cfg.data.train_src, cfg.data.train_tgt)
    if train is None:
        raise ConfigError("text mode needs data.train_src and data.train_tgt")
    return DataBundle(train=train,
                      dev=load(cfg.data.dev_src, cfg.data.dev_tgt),
                      test=load(cfg.data.test_src, cfg.data.test_tgt),
                      src_vocab=bpe_src.size, tgt_vocab=bpe_tgt.size,
                      bpe_src=bpe_src, bpe_tgt=bpe_tgt)


@dataclass
class TrainResult:
    steps: int
    ckpt_paths: list[str]
    avg_path: str
    metrics_path: str
    dev_bleu_best: float
    dev_bleu_final: float
    stopped_early: bool
    model: SBDModel
    data: DataBundle


def _model_config(cfg, data: DataBundle, variant: str) -> ModelConfig:
    return ModelConfig(
        d_model=cfg.model.d_model, heads=cfg.model.heads, layers=cfg.model.layers,
        d_ffn=cfg.model.d_ffn, dropout=cfg.model.dropout, max_pos=cfg.model.max_pos,
        src_vocab=data.src_vocab, tgt_vocab=data.tgt_vocab,
        share_target_embedding=cfg.model.share_target_embedding,
        with_fwd=variant != "r2l", with_bwd=variant != "l2r")


def _dev_bleu(model, corpus: ParallelCorpus, variant: str, cfg) -> float:
    srcs = [p[0] for p in corpus.pairs]
    refs = [p[1][:-1] for p in corpus.pairs]
    if variant == "r2l":
        hyps = [r2l_greedy_decode(model, s, alpha=cfg.decode.alpha,
                                  max_len_factor=cfg.decode.max_len_factor) for s in srcs]
    else:
        hyps = greedy_decode_batch(model, srcs, max_len_factor=cfg.decode.max_len_factor)
    return bleu(hyps, refs)


def train(cfg, out_dir: str, log=sys.stderr) -> TrainResult:
    """Run the full loop described by cfg, writing into out_dir:
    config_used.cfg, metrics.jsonl, step checkpoints, and ckpt_avg.bin
    (the arithmetic mean of the last optim.avg_last_k checkpoints, which
    is also the model this function returns and scores)."""
    variant = cfg.train.variant
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    os.makedirs(out_dir, exist_ok=True)
    cfg.write(os.path.join(out_dir, "config_used.cfg"))

    data = build_data(cfg)
    model = SBDModel(_model_config(cfg, data, variant), seed=cfg.optim.seed)
    opt = Adam(model.parameters())

    seed = cfg.optim.seed
    max_steps = cfg.optim.max_steps
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    ckpt_paths: list[str] = []
    dev_bleu_best = -1.0
    evals_since_best = 0
    stopped_early = False
    step = 0

    def save_step_ckpt() -> str:
        path = os.path.join(out_dir, f"ckpt_{step:06d}.bin")
        save_checkpoint(path, model_state(model))
        ckpt_paths.append(path)
        return path

    with open(metrics_path, "w", encoding="utf-8") as mf:
        epoch = 0
        while step < max_steps and not stopped_early:
            for batch in make_batches(data.train, cfg.optim.tokens_per_batch, seed + epoch):
                step += 1
                srng = StepRNG(seed, step)
                for p in model.parameters().values():
                    p.zero_grad()
                try:
                    total, parts = joint_loss(
                        model, batch, variant=variant, eps_ls=cfg.loss.eps_ls,
                        step=step, w_step=cfg.loss.w_step,
                        use_logit_kd=cfg.loss.use_logit_kd,
                        use_hidden_kd=cfg.loss.use_hidden_kd,
                        use_annealing=cfg.loss.use_annealing,
                        stop_teacher_grad=cfg.loss.stop_teacher_grad, srng=srng)
                    backward(total)
                except NumericError as e:
                    raise NumericError(f"non-finite value at step {step}: {e}") from e
                clip_global_norm(model.parameters(), cfg.optim.clip_norm)
                lr = noam_lr(step, cfg.model.d_model, cfg.optim.warmup)
                opt.step(lr)

                is_log = step == 1 or step % cfg.optim.log_every == 0
                is_ckpt = step % cfg.optim.ckpt_every == 0 or step == max_steps
                dev_score = None
                if is_ckpt:
                    save_step_ckpt()
                    if data.dev is not None:
                        dev_score = _dev_bleu(model, data.dev, variant, cfg)
                        if dev_score > dev_bleu_best:
                            dev_bleu_best = dev_score
                            evals_since_best = 0
                        else:
                            evals_since_best += 1
                        if 0 < cfg.optim.patience <= evals_since_best:
                            stopped_early = True
                if is_log or is_ckpt:
                    rec = {"step": step, "lambda": parts.lam, "lr": lr,
                           "ce_fwd": parts.ce_fwd, "ce_bwd": parts.ce_bwd,
                           "kd_logit": parts.kd_logit, "kd_hidden": parts.kd_hidden,
                           "total": parts.total}
                    if dev_score is not None:
                        rec["dev_bleu"] = dev_score
                    mf.write(json.dumps(rec) + "\n")
                    mf.flush()
                    msg = f"[train] step {step}/{max_steps} total {parts.total:.4f} lr {lr:.5f}"
                    if dev_score is not None:
                        msg += f" dev_bleu {dev_score:.2f}"
                    print(msg, file=log, flush=True)
                if step >= max_steps or stopped_early:
                    break
            epoch += 1

    if not ckpt_paths or not ckpt_paths[-1].endswith(f"ckpt_{step:06d}.bin"):
        save_step_ckpt()

    k = max(1, min(cfg.optim.avg_last_k, len(ckpt_paths)))
    avg = average_checkpoints(ckpt_paths[-k:])
    avg_path = os.path.join(out_dir, "ckpt_avg.bin")
    save_checkpoint(avg_path, avg)
    load_into_model(model, avg_path)

    dev_final = _dev_bleu(model, data.dev, variant, cfg) if data.dev is not None else float("nan")
    print(f"[train] done at step {step}; averaged last {k}; dev_bleu {dev_final:.2f}",
          file=log, flush=True)
    return TrainResult(steps=step, ckpt_paths=ckpt_paths, avg_path=avg_path,
                       metrics_path=metrics_path, dev_bleu_best=dev_bleu_best,
                       dev_bleu_final=dev_final, stopped_early=stopped_early,
                       model=model, data=data)


def sweep_wstep(cfg, out_dir: str, candidates: list[int], log=sys.stderr) -> list[tuple[int, float]]:
    """Train once per candidate teacher-decay knee; report dev BLEU of the
    averaged model for each.  Everything else stays fixed."""
    if not candidates:
        raise ConfigError("sweep needs at least one w_step candidate")
    rows = []
    for w in candidates:
        run_cfg = cfg.replace(**{"loss.w_step": w})
        print(f"[sweep] w_step={w}", file=log, flush=True)
        result = train(run_cfg, os.path.join(out_dir, f"w{w}"), log=log)
        rows.append((w, result.dev_bleu_final))
    return rows


def format_sweep(rows: list[tuple[int, float]]) -> str:
    lines = ["w_step\tdev_bleu"]
    for w, score in rows:
        lines.append(f"{w}\t{score:.2f}")
    best = max(rows, key=lambda r: (r[1], -r[0]))
    lines.append(f"best\t{best[0]}")
    return "\n".join(lines)
