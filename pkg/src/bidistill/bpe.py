"""Byte Pair Encoding: vocabulary learning, application, and model files.

Word-internal BPE with a dedicated "</w>" end-of-word symbol.  Special
token ids are fixed and shared by every model in this package.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .errors import InputError

PAD, BOS, EOS, UNK, R2L = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>", "<r2l>")
NUM_SPECIALS = len(SPECIAL_TOKENS)

END_OF_WORD = "</w>"

MODEL_HEADER = "SBD-BPE v1"


@dataclass
class BPEModel:
    """Ordered merge rules plus the token <-> id table.

    Ids are dense 0..|V|-1 with specials pinned at 0-4.  Earlier merges
    have higher application priority.
    """

    merges: list[tuple[str, str]]
    vocab: list[str]
    token_to_id: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.token_to_id:
            self.token_to_id = {tok: i for i, tok in enumerate(self.vocab)}

    @property
    def size(self) -> int:
        return len(self.vocab)


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple(word) + (END_OF_WORD,)


def _merge_word(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    out = []
    i = 0
    merged = pair[0] + pair[1]
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def _pair_sort_key(pair: tuple[str, str]) -> tuple[str, str]:
    # Canonical symbol order: the end-of-word marker sorts after every
    # ordinary character, so ("a","a") beats ("a","</w>") on a tie.
    return tuple(s.replace(END_OF_WORD, "\uffff") for s in pair)


def bpe_learn(corpus, num_merges: int) -> BPEModel:
    """Learn merge rules by greedy most-frequent-pair counting.

    Ties break on lexicographic pair order so learning is deterministic.
    """
    word_freq: Counter = Counter()
    for line in corpus:
        for word in line.split():
            word_freq[word] += 1
    if not word_freq:
        raise InputError("bpe_learn: corpus contains no words")
    if num_merges < 0:
        raise InputError(f"bpe_learn: num_merges must be >= 0, got {num_merges}")

    words = {w: _word_symbols(w) for w in word_freq}
    chars = sorted({s for syms in words.values() for s in syms})

    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pair_freq: Counter = Counter()
        for w, syms in words.items():
            f = word_freq[w]
            for a, b in zip(syms, syms[1:]):
                pair_freq[(a, b)] += f
        if not pair_freq:
            break
        best = min(pair_freq.items(), key=lambda kv: (-kv[1], _pair_sort_key(kv[0])))[0]
        merges.append(best)
        words = {w: _merge_word(syms, best) for w, syms in words.items()}

    vocab = list(SPECIAL_TOKENS) + chars + [a + b for a, b in merges]
    return BPEModel(merges=merges, vocab=vocab)


def encode(model: BPEModel, text: str) -> list[int]:
    """Apply merges in priority order per word; unknown residue maps to UNK."""
    ids: list[int] = []
    for word in text.split():
        syms = _word_symbols(word)
        for pair in model.merges:
            if len(syms) < 2:
                break
            syms = _merge_word(syms, pair)
        for s in syms:
            ids.append(model.token_to_id.get(s, UNK))
    return ids


def decode(model: BPEModel, ids) -> str:
    """Invert encode: concatenate tokens, end-of-word markers become spaces."""
    pieces = []
    for i in ids:
        i = int(i)
        if i < 0 or i >= model.size:
            raise InputError(f"decode: id {i} out of range for vocab of size {model.size}")
        if i < NUM_SPECIALS:
            continue
        pieces.append(model.vocab[i])
    return "".join(pieces).replace(END_OF_WORD, " ").rstrip(" ")


def save_model(model: BPEModel, merges_path: str, vocab_path: str | None = None) -> None:
    """Model file: header line then one 'left right' merge per line."""
    with open(merges_path, "w", encoding="utf-8") as f:
        f.write(MODEL_HEADER + "\n")
        for a, b in model.merges:
            f.write(f"{a} {b}\n")
    if vocab_path is not None:
        with open(vocab_path, "w", encoding="utf-8") as f:
            for tok in model.vocab:
                f.write(tok + "\n")


def load_model(merges_path: str, vocab_path: str) -> BPEModel:
    with open(merges_path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != MODEL_HEADER:
        raise InputError(f"{merges_path}: missing '{MODEL_HEADER}' header")
    merges = []
    for ln in lines[1:]:
        if not ln:
            continue
        parts = ln.split(" ")
        if len(parts) != 2:
            raise InputError(f"{merges_path}: malformed merge line {ln!r}")
        merges.append((parts[0], parts[1]))
    with open(vocab_path, encoding="utf-8") as f:
        vocab = f.read().splitlines()
    if vocab[:NUM_SPECIALS] != list(SPECIAL_TOKENS):
        raise InputError(f"{vocab_path}: first {NUM_SPECIALS} entries must be the special tokens")
    return BPEModel(merges=merges, vocab=vocab)
