"""Flat dotted-key configuration: `key = value` lines, full-line # comments.

Every key is registered here with its type and default; unknown keys are
rejected so typos fail loudly instead of training the wrong model.  The
same registry drives the per-key CLI override flags and the config echo
written next to run outputs.
"""

from __future__ import annotations

from .errors import ConfigError

# key -> (type, default).  bool values are written and parsed as true/false.
KEYS: dict[str, tuple[type, object]] = {
    "model.d_model": (int, 64),
    "model.heads": (int, 4),
    "model.layers": (int, 2),
    "model.d_ffn": (int, 256),
    "model.dropout": (float, 0.1),
    "model.share_target_embedding": (bool, False),
    "model.max_pos": (int, 512),

    "loss.eps_ls": (float, 0.1),
    "loss.use_logit_kd": (bool, True),
    "loss.use_hidden_kd": (bool, True),
    "loss.use_annealing": (bool, True),
    "loss.stop_teacher_grad": (bool, False),
    "loss.w_step": (int, 1000),

    "optim.warmup": (int, 400),
    "optim.max_steps": (int, 3000),
    "optim.tokens_per_batch": (int, 512),
    "optim.seed": (int, 1),
    "optim.ckpt_every": (int, 500),
    "optim.avg_last_k": (int, 5),
    "optim.log_every": (int, 50),
    "optim.patience": (int, 0),
    "optim.clip_norm": (float, 1.0),

    "decode.beam": (int, 4),
    "decode.alpha": (float, 0.6),
    "decode.max_len_factor": (float, 2.0),

    "data.task": (str, ""),
    "data.vocab_size": (int, 32),
    "data.n_train": (int, 2000),
    "data.n_dev": (int, 64),
    "data.n_test": (int, 64),
    "data.max_len": (int, 12),
    "data.min_len": (int, 2),
    "data.max_example_tokens": (int, 256),
    "data.num_merges": (int, 200),
    "data.joint_vocab": (bool, False),
    "data.train_src": (str, ""),
    "data.train_tgt": (str, ""),
    "data.dev_src": (str, ""),
    "data.dev_tgt": (str, ""),
    "data.test_src": (str, ""),
    "data.test_tgt": (str, ""),
    "data.src_bpe_merges": (str, ""),
    "data.src_bpe_vocab": (str, ""),
    "data.tgt_bpe_merges": (str, ""),
    "data.tgt_bpe_vocab": (str, ""),

    "train.variant": (str, "sbd"),
}

_SECTIONS = {key.split(".", 1)[0] for key in KEYS}


def parse_value(key: str, text: str):
    """Parse the textual form of one value per the key's registered type."""
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    typ, _ = KEYS[key]
    text = text.strip()
    if typ is bool:
        low = text.lower()
        if low in ("true", "false"):
            return low == "true"
        raise ConfigError(f"{key}: expected true or false, got {text!r}")
    if typ is int:
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") from None
    if typ is float:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {text!r}") from None
    return text


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


class _Section:
    def __init__(self, values: dict, prefix: str):
        object.__setattr__(self, "_values", values)
        object.__setattr__(self, "_prefix", prefix)

    def __getattr__(self, name: str):
        key = f"{self._prefix}.{name}"
        if key not in self._values:
            raise AttributeError(f"no config key {key!r}")
        return self._values[key]

    def __setattr__(self, name, value):
        raise TypeError("config is read-only; use replace()")


class Config:
    """Immutable resolved configuration with cfg.section.key access."""

    def __init__(self, values: dict | None = None):
        resolved = {key: default for key, (_, default) in KEYS.items()}
        if values:
            for key, value in values.items():
                resolved[key] = self._check(key, value)
        object.__setattr__(self, "_values", resolved)

    @staticmethod
    def _check(key: str, value):
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        typ, _ = KEYS[key]
        if typ is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if typ is not bool and isinstance(value, bool):
            raise ConfigError(f"{key}: expected {typ.__name__}, got a bool")
        if not isinstance(value, typ):
            raise ConfigError(f"{key}: expected {typ.__name__}, got {type(value).__name__}")
        return value

    def __getattr__(self, section: str):
        if section not in _SECTIONS:
            raise AttributeError(f"no config section {section!r}")
        return _Section(self._values, section)

    def __setattr__(self, name, value):
        raise TypeError("config is read-only; use replace()")

    def get(self, key: str):
        if key not in self._values:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def replace(self, **overrides) -> "Config":
        merged = dict(self._values)
        for key, value in overrides.items():
            merged[key] = self._check(key, value)
        return Config(merged)

    def to_text(self) -> str:
        lines = [f"{key} = {_format_value(self._values[key])}" for key in sorted(self._values)]
        return "\n".join(lines) + "\n"

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_text())

    @classmethod
    def from_file(cls, path: str) -> "Config":
        values = {}
        with open(path, encoding="utf-8") as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
                key, _, text = line.partition("=")
                key = key.strip()
                values[key] = parse_value(key, text)
        return cls(values)

    def apply_overrides(self, pairs: dict[str, str]) -> "Config":
        """Apply textual overrides (e.g. from CLI flags), parsed per key type."""
        return self.replace(**{key: parse_value(key, text) for key, text in pairs.items()})
