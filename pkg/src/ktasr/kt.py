"""Knowledge-transfer branch: token-dependent queries, cross-modal
multi-head attention over the acoustic states, shift alignment, and the
scaled cosine distillation loss.

Query/output rows are indexed 0..N+1 where 0 and N+1 are the BOS/EOS
positions; those rows attend like any other but are never loss targets.
"""

import enum
from dataclasses import dataclass, field
import math

import numpy as np

from .errors import ConfigError, DataError
from . import numerics as nm
from .encoder import attention_params, multi_head_attention, sinusoid_table
from .numerics import Parameter, Tensor


class QueryMode(enum.Enum):
    POSITIONAL_ONLY = "pos"
    TOKEN_PLUS_POSITIONAL = "token_pos"


class ShiftMode(enum.Enum):
    NONE = 0
    LEFT = -1
    RIGHT = 1


@dataclass
class KtConfig:
    k: float = 20.0
    query_mode: QueryMode = QueryMode.TOKEN_PLUS_POSITIONAL
    shift_mode: ShiftMode = ShiftMode.NONE
    n_heads: int = 4

    def __post_init__(self):
        if self.k <= 0:
            raise ConfigError("scaling factor k must be positive")


@dataclass
class KtOutputs:
    queries: Tensor          # (N+2) x d
    attended: Tensor         # (N+2) x d
    pairs: list = field(default_factory=list)
    loss: Tensor = None


def align_pairs(n, shift):
    """(teacher n, student m=n+i) pairs, dropping any m outside 1..N so the
    BOS/EOS output rows are never loss targets."""
    if n < 1:
        raise DataError("alignment needs at least one token")
    i = shift.value if isinstance(shift, ShiftMode) else int(shift)
    if i not in (-1, 0, 1):
        raise ConfigError(f"shift must be one of -1, 0, 1, got {i}")
    return [(t, t + i) for t in range(1, n + 1) if 1 <= t + i <= n]


def kt_loss(h_avg, outputs, pairs, k):
    """k * sum over pairs of (1 - cos(teacher row, attended row)).

    h_avg is a constant (N+2) x d matrix; empty pair lists contribute a
    constant zero.
    """
    if not pairs:
        return Tensor(0.0)
    total = None
    for t_idx, s_idx in pairs:
        c = nm.cosine_to_const(nm.slice_rows(outputs, s_idx, s_idx + 1), h_avg[t_idx])
        term = nm.add(Tensor(1.0), nm.scale(c, -1.0))
        total = term if total is None else nm.add(total, term)
    return nm.scale(total, k)


class KtModule:
    """Owns the trainable query embedding table and cross-attention params."""

    def __init__(self, cfg: KtConfig, d_model, vocab_size, rng, init_table=None):
        self.cfg = cfg
        self.d_model = d_model
        self.vocab_size = vocab_size
        self.bos_id = vocab_size + 1
        self.eos_id = vocab_size + 2
        self.params = {}
        table = rng.standard_normal((vocab_size + 3, d_model)) / math.sqrt(d_model)
        if init_table is not None and init_table.shape == table.shape:
            table = init_table.copy()
        self.params["embed"] = Parameter(table, name="embed")
        attention_params(rng, d_model, "attn", self.params)
        for name, p in self.params.items():
            p.name = name

    def build_queries(self, tokens):
        """Query rows for [BOS] y_1..y_N [EOS]: sinusoidal position signal,
        plus the token embedding in TOKEN_PLUS_POSITIONAL mode."""
        tokens = list(tokens)
        for t in tokens:
            if not 1 <= t <= self.vocab_size:
                raise DataError(f"token id {t} out of query vocab")
        n_pos = len(tokens) + 2
        pos = Tensor(sinusoid_table(n_pos, self.d_model))
        if self.cfg.query_mode is QueryMode.POSITIONAL_ONLY:
            return pos
        ids = [self.bos_id] + tokens + [self.eos_id]
        return nm.add(nm.gather_rows(self.params["embed"].use(), ids), pos)

    def cross_attention(self, queries, acoustic, attn_sink=None):
        return multi_head_attention(queries, acoustic, self.params, "attn",
                                    self.cfg.n_heads, attn_sink=attn_sink)

    def forward(self, acoustic, tokens, h_avg):
        """Full branch for one utterance: queries, attention, aligned pairs,
        and the distillation loss against the teacher layer average."""
        e = self.build_queries(tokens)
        o = self.cross_attention(e, acoustic)
        pairs = align_pairs(len(list(tokens)), self.cfg.shift_mode)
        loss = kt_loss(h_avg, o, pairs, self.cfg.k)
        return KtOutputs(queries=e, attended=o, pairs=pairs, loss=loss)

    def param_groups(self):
        return {"kt": list(self.params.values())}

    def n_params(self):
        return sum(p.value.size for p in self.params.values())
