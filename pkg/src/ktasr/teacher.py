"""Frozen, seeded token-sequence teacher.

Two modes. "random": a small bidirectional transformer with seeded random
weights whose per-layer hidden states (layer 0 = input embeddings) are
averaged into the distillation target. "oracle": the averaged target is
the token's one-hot vector smoothed with its neighbors, which gives the
target genuine contextual signal at desk scale. Both are deterministic
functions of (seed, token sequence) and never receive gradients.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .numerics import Parameter

MAX_TEACHER_POSITIONS = 512

ORACLE_SELF_WEIGHT = 0.7
ORACLE_NEIGHBOR_WEIGHT = 0.15


@dataclass
class TeacherConfig:
    d_teacher: int = 64
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 16
    seed: int = 0
    mode: str = "random"  # "random" | "oracle"

    def __post_init__(self):
        if self.mode not in ("random", "oracle"):
            raise ConfigError(f"unknown teacher mode {self.mode!r}")
        if self.d_teacher % self.n_heads != 0:
            raise ConfigError("d_teacher must be divisible by n_heads")
        # table covers blank(0), tokens 1..V, BOS=V+1, EOS=V+2
        if self.mode == "oracle" and self.vocab_size + 3 > self.d_teacher:
            raise ConfigError("oracle teacher needs vocab_size + 3 <= d_teacher")

    @property
    def bos_id(self):
        return self.vocab_size + 1

    @property
    def eos_id(self):
        return self.vocab_size + 2

    @property
    def table_size(self):
        return self.vocab_size + 3


@dataclass
class TeacherStates:
    """Per-layer hidden states for [BOS] y_1..y_N [EOS], plus their mean."""
    layers: list
    avg: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.avg is None:
            self.avg = layer_average(self)


def layer_average(states):
    """Elementwise mean over all layers, input embeddings included."""
    if not states.layers:
        raise DataError("teacher states need at least one layer")
    return np.mean(np.stack(states.layers, axis=0), axis=0)


class Teacher:
    def __init__(self, cfg: TeacherConfig):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 17]))
        d = cfg.d_teacher
        self.params = {}

        def frozen(name, arr):
            p = Parameter(arr, frozen=True, name=name)
            self.params[name] = p
            return p

        frozen("embed.tok", rng.standard_normal((cfg.table_size, d)) / math.sqrt(d))
        frozen("embed.pos", rng.standard_normal((MAX_TEACHER_POSITIONS, d)) / math.sqrt(d))
        for i in range(cfg.n_layers):
            pre = f"layer{i}"
            std = 1.0 / math.sqrt(d)
            for w in ("wq", "wk", "wv", "wo"):
                frozen(f"{pre}.attn.{w}", rng.standard_normal((d, d)) * std)
            for b in ("bq", "bk", "bv", "bo"):
                frozen(f"{pre}.attn.{b}", np.zeros(d))
            frozen(f"{pre}.ln1.gain", np.ones(d))
            frozen(f"{pre}.ln1.bias", np.zeros(d))
            frozen(f"{pre}.ln2.gain", np.ones(d))
            frozen(f"{pre}.ln2.bias", np.zeros(d))
            frozen(f"{pre}.ffn.w1", rng.standard_normal((d, 2 * d)) * std)
            frozen(f"{pre}.ffn.b1", np.zeros(2 * d))
            frozen(f"{pre}.ffn.w2", rng.standard_normal((2 * d, d)) / math.sqrt(2 * d))
            frozen(f"{pre}.ffn.b2", np.zeros(d))

    def token_embeddings(self):
        return self.params["embed.tok"].value.copy()

    def _check_tokens(self, tokens):
        if not tokens:
            raise DataError("teacher got an empty token sequence")
        for t in tokens:
            if not 1 <= t <= self.cfg.vocab_size:
                raise DataError(f"token id {t} out of teacher vocab")

    def encode(self, tokens):
        """[BOS] y_1..y_N [EOS] -> TeacherStates; row n of every layer
        corresponds index-for-index to y_n for n in 1..N."""
        self._check_tokens(list(tokens))
        cfg = self.cfg
        ids = [cfg.bos_id] + list(tokens) + [cfg.eos_id]
        if cfg.mode == "oracle":
            return TeacherStates(layers=[self._oracle_rows(ids)])
        d = cfg.d_teacher
        n_pos = len(ids)
        h = (self.params["embed.tok"].value[ids]
             + self.params["embed.pos"].value[:n_pos])
        layers = [h.copy()]
        dh = d // cfg.n_heads
        for i in range(cfg.n_layers):
            pre = f"layer{i}"
            p = {k: self.params[f"{pre}.{k}"].value for k in
                 ("attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv",
                  "attn.bv", "attn.wo", "attn.bo", "ln1.gain", "ln1.bias",
                  "ln2.gain", "ln2.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2")}
            a_in = _np_layer_norm(h, p["ln1.gain"], p["ln1.bias"])
            q = a_in @ p["attn.wq"] + p["attn.bq"]
            k = a_in @ p["attn.wk"] + p["attn.bk"]
            v = a_in @ p["attn.wv"] + p["attn.bv"]
            heads = []
            for hh in range(cfg.n_heads):
                sl = slice(hh * dh, (hh + 1) * dh)
                s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
                s = s - s.max(axis=1, keepdims=True)
                a = np.exp(s)
                a /= a.sum(axis=1, keepdims=True)
                heads.append(a @ v[:, sl])
            h = h + np.concatenate(heads, axis=1) @ p["attn.wo"] + p["attn.bo"]
            f_in = _np_layer_norm(h, p["ln2.gain"], p["ln2.bias"])
            h = h + np.maximum(f_in @ p["ffn.w1"] + p["ffn.b1"], 0.0) @ p["ffn.w2"] + p["ffn.b2"]
            layers.append(h.copy())
        return TeacherStates(layers=layers)

    def _oracle_rows(self, ids):
        d = self.cfg.d_teacher
        n = len(ids)
        one_hot = np.zeros((n, d))
        one_hot[np.arange(n), ids] = 1.0
        rows = np.zeros((n, d))
        rows[0] = one_hot[0]
        rows[-1] = one_hot[-1]
        for i in range(1, n - 1):
            rows[i] = (ORACLE_SELF_WEIGHT * one_hot[i]
                       + ORACLE_NEIGHBOR_WEIGHT * one_hot[i - 1]
                       + ORACLE_NEIGHBOR_WEIGHT * one_hot[i + 1])
        return rows


def _np_layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def build_teacher(cfg: TeacherConfig) -> Teacher:
    return Teacher(cfg)
