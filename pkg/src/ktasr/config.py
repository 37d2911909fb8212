"""Flat-key run configuration.

Every tunable lives under a dotted key with a default; config files are
`key = value` lines (# comments allowed), unknown keys are rejected, and
the fingerprint is the sha256 of the canonicalized text. The fingerprint
gates checkpoint averaging.
"""

import hashlib

from .encoder import EncoderConfig
from .errors import ConfigError
from .kt import KtConfig, QueryMode, ShiftMode
from .teacher import TeacherConfig
from .data import SynthConfig
from .training import TrainConfig

_QUERY_MODES = {"pos": QueryMode.POSITIONAL_ONLY,
                "token_pos": QueryMode.TOKEN_PLUS_POSITIONAL}
_SHIFT_MODES = {"none": ShiftMode.NONE, "left": ShiftMode.LEFT,
                "right": ShiftMode.RIGHT}


def _bool(s):
    if isinstance(s, bool):
        return s
    if s.lower() in ("true", "on", "yes", "1"):
        return True
    if s.lower() in ("false", "off", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (parser, default)
KEYS = {
    "seed": (int, 0),
    "encoder.d_model": (int, 64),
    "encoder.n_layers": (int, 2),
    "encoder.n_heads": (int, 4),
    "encoder.ffn_dim": (int, 128),
    "encoder.conv_width": (int, 3),
    "encoder.conv_stride": (int, 2),
    "encoder.feat_dim": (int, 20),
    "encoder.vocab_size": (int, 16),
    "encoder.dropout_rate": (float, 0.0),
    "teacher.n_layers": (int, 4),
    "teacher.n_heads": (int, 4),
    "teacher.mode": (str, "random"),
    "kt.enabled": (_bool, True),
    "kt.k": (float, 20.0),
    "kt.query_mode": (str, "token_pos"),
    "kt.shift": (str, "none"),
    "kt.n_heads": (int, 4),
    "kt.stop_gradient": (_bool, False),
    "train.lambda": (float, 0.3),
    "train.lr_peak": (float, 1e-3),
    "train.warmup_steps": (int, 500),
    "train.freeze_encoder_until": (int, 100),
    "train.max_epochs": (int, 20),
    "train.patience": (int, 3),
    "train.avg_best_k": (int, 5),
    "train.batch_size": (int, 8),
    "train.grad_accum": (int, 1),
    "train.select_by": (str, "loss"),
    "synth.vocab_size": (int, 16),
    "synth.f_in": (int, 20),
    "synth.frames_per_token_min": (int, 2),
    "synth.frames_per_token_max": (int, 5),
    "synth.noise_sigma": (float, 0.1),
    "synth.silence_prob": (float, 0.1),
    "synth.n_train": (int, 800),
    "synth.n_dev": (int, 100),
    "synth.n_test": (int, 100),
    "synth.seq_len_min": (int, 3),
    "synth.seq_len_max": (int, 10),
}


class RunConfig:
    def __init__(self, overrides=None):
        self.values = {k: d for k, (_, d) in KEYS.items()}
        if overrides:
            self.update(overrides)

    def update(self, overrides):
        for key, raw in overrides.items():
            if key not in KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            parser, _ = KEYS[key]
            try:
                self.values[key] = parser(raw) if isinstance(raw, str) else parser(raw)
            except (ValueError, TypeError) as e:
                raise ConfigError(f"bad value for {key}: {e}") from e
        self.validate()

    def validate(self):
        v = self.values
        if not 0.0 <= v["train.lambda"] <= 1.0:
            raise ConfigError("train.lambda must lie in [0, 1]")
        if v["kt.query_mode"] not in _QUERY_MODES:
            raise ConfigError(f"kt.query_mode must be one of {sorted(_QUERY_MODES)}")
        if v["kt.shift"] not in _SHIFT_MODES:
            raise ConfigError(f"kt.shift must be one of {sorted(_SHIFT_MODES)}")
        if v["teacher.mode"] not in ("random", "oracle"):
            raise ConfigError("teacher.mode must be 'random' or 'oracle'")
        if v["train.select_by"] not in ("loss", "cer"):
            raise ConfigError("train.select_by must be 'loss' or 'cer'")
        for key in KEYS:
            if key.startswith(("train.", "synth.")) and isinstance(v[key], int) and v[key] < 0:
                raise ConfigError(f"{key} must be nonnegative")

    def __getitem__(self, key):
        return self.values[key]

    def canonical_text(self):
        lines = []
        for key in sorted(self.values):
            val = self.values[key]
            if isinstance(val, bool):
                s = "true" if val else "false"
            elif isinstance(val, float):
                s = repr(val)
            else:
                s = str(val)
            lines.append(f"{key} = {s}")
        return "\n".join(lines) + "\n"

    def fingerprint(self):
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    # typed sub-config views -------------------------------------------------

    def encoder_config(self):
        v = self.values
        return EncoderConfig(
            d_model=v["encoder.d_model"], n_layers=v["encoder.n_layers"],
            n_heads=v["encoder.n_heads"], ffn_dim=v["encoder.ffn_dim"],
            conv_width=v["encoder.conv_width"], conv_stride=v["encoder.conv_stride"],
            feat_dim=v["encoder.feat_dim"], vocab_size=v["encoder.vocab_size"],
            dropout_rate=v["encoder.dropout_rate"])

    def teacher_config(self):
        v = self.values
        return TeacherConfig(
            d_teacher=v["encoder.d_model"], n_layers=v["teacher.n_layers"],
            n_heads=v["teacher.n_heads"], vocab_size=v["encoder.vocab_size"],
            seed=v["seed"], mode=v["teacher.mode"])

    def kt_config(self):
        v = self.values
        return KtConfig(k=v["kt.k"], query_mode=_QUERY_MODES[v["kt.query_mode"]],
                        shift_mode=_SHIFT_MODES[v["kt.shift"]],
                        n_heads=v["kt.n_heads"])

    def train_config(self):
        v = self.values
        return TrainConfig(
            lam=v["train.lambda"], lr_peak=v["train.lr_peak"],
            warmup_steps=v["train.warmup_steps"],
            freeze_encoder_until=v["train.freeze_encoder_until"],
            max_epochs=v["train.max_epochs"], patience=v["train.patience"],
            avg_best_k=v["train.avg_best_k"], batch_size=v["train.batch_size"],
            grad_accum=v["train.grad_accum"], seed=v["seed"],
            kt_stop_gradient=v["kt.stop_gradient"],
            select_by=v["train.select_by"])

    def synth_config(self):
        v = self.values
        return SynthConfig(
            vocab_size=v["synth.vocab_size"], f_in=v["synth.f_in"],
            frames_per_token_min=v["synth.frames_per_token_min"],
            frames_per_token_max=v["synth.frames_per_token_max"],
            noise_sigma=v["synth.noise_sigma"], silence_prob=v["synth.silence_prob"],
            n_train=v["synth.n_train"], n_dev=v["synth.n_dev"],
            n_test=v["synth.n_test"], seq_len_min=v["synth.seq_len_min"],
            seq_len_max=v["synth.seq_len_max"], seed=v["seed"],
            conv_width=v["encoder.conv_width"], conv_stride=v["encoder.conv_stride"])


def parse_config_text(text):
    """`key = value` lines into an override dict; # starts a comment."""
    overrides = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value', got {line!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        overrides[key] = val
    return overrides


def load_config(path=None, overrides=None):
    cfg = RunConfig()
    if path is not None:
        with open(path) as f:
            cfg.update(parse_config_text(f.read()))
    if overrides:
        cfg.update(overrides)
    return cfg
