"""Desk-scale acoustic encoder: strided conv front-end, pre-norm
transformer stack with additive sinusoidal positions, a distinct final
layer norm, and a linear + log-softmax CTC head."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from . import numerics as nm
from .numerics import Parameter, Tensor


@dataclass
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 128
    conv_width: int = 3
    conv_stride: int = 2
    feat_dim: int = 20
    vocab_size: int = 16
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")
        for f in ("d_model", "n_layers", "n_heads", "ffn_dim", "conv_width",
                  "conv_stride", "feat_dim", "vocab_size"):
            if getattr(self, f) <= 0:
                raise ConfigError(f"{f} must be positive")

    def out_frames(self, t_raw):
        return (t_raw - self.conv_width) // self.conv_stride + 1


def sinusoid_table(n_pos, d):
    """Standard sin/cos absolute positional table: even dims sin, odd cos."""
    pe = np.zeros((n_pos, d))
    pos = np.arange(n_pos)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)
    return pe


def attention_params(rng, d_model, prefix, params):
    std = 1.0 / math.sqrt(d_model)
    for nm_ in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.{nm_}"] = Parameter(
            rng.standard_normal((d_model, d_model)) * std, name=f"{prefix}.{nm_}")
    for nm_ in ("bq", "bk", "bv", "bo"):
        params[f"{prefix}.{nm_}"] = Parameter(np.zeros(d_model), name=f"{prefix}.{nm_}")


def multi_head_attention(q_in, kv_in, p, prefix, n_heads, attn_sink=None):
    """Projected multi-head attention; per-query weights over the keys sum
    to 1 per head. `p` is a name->Parameter dict holding wq/bq/.../wo/bo
    under `prefix`. Softmaxed weights are appended to attn_sink if given."""
    d = q_in.shape[1]
    if kv_in.shape[1] != d:
        raise NumericError(f"attention width mismatch: {q_in.shape} vs {kv_in.shape}")
    dh = d // n_heads
    q = nm.add(nm.matmul(q_in, p[f"{prefix}.wq"].use()), p[f"{prefix}.bq"].use())
    k = nm.add(nm.matmul(kv_in, p[f"{prefix}.wk"].use()), p[f"{prefix}.bk"].use())
    v = nm.add(nm.matmul(kv_in, p[f"{prefix}.wv"].use()), p[f"{prefix}.bv"].use())
    heads = []
    for h in range(n_heads):
        qh = nm.slice_cols(q, h * dh, (h + 1) * dh)
        kh = nm.slice_cols(k, h * dh, (h + 1) * dh)
        vh = nm.slice_cols(v, h * dh, (h + 1) * dh)
        scores = nm.scale(nm.matmul(qh, nm.transpose(kh)), 1.0 / math.sqrt(dh))
        a = nm.softmax_rows(scores)
        if attn_sink is not None:
            attn_sink.append(a)
        heads.append(nm.matmul(a, vh))
    cat = nm.concat_cols(heads)
    return nm.add(nm.matmul(cat, p[f"{prefix}.wo"].use()), p[f"{prefix}.bo"].use())


class Encoder:
    """Holds the parameter set and runs the forward pass.

    Parameter groups: "conv" (front-end), "transformer" (all blocks),
    "final_ln", "output" (CTC head). Freeze flags apply per group.
    """

    def __init__(self, cfg: EncoderConfig, rng):
        self.cfg = cfg
        self.params = {}
        d, w = cfg.d_model, cfg.conv_width
        self.params["conv.kernel"] = Parameter(
            rng.standard_normal((w, cfg.feat_dim, d)) / math.sqrt(w * cfg.feat_dim),
            name="conv.kernel")
        self.params["conv.bias"] = Parameter(np.zeros(d), name="conv.bias")
        for i in range(cfg.n_layers):
            pre = f"layer{i}"
            for ln in ("ln1", "ln2"):
                self.params[f"{pre}.{ln}.gain"] = Parameter(np.ones(d))
                self.params[f"{pre}.{ln}.bias"] = Parameter(np.zeros(d))
            attention_params(rng, d, f"{pre}.attn", self.params)
            self.params[f"{pre}.ffn.w1"] = Parameter(
                rng.standard_normal((d, cfg.ffn_dim)) / math.sqrt(d))
            self.params[f"{pre}.ffn.b1"] = Parameter(np.zeros(cfg.ffn_dim))
            self.params[f"{pre}.ffn.w2"] = Parameter(
                rng.standard_normal((cfg.ffn_dim, d)) / math.sqrt(cfg.ffn_dim))
            self.params[f"{pre}.ffn.b2"] = Parameter(np.zeros(d))
        self.params["final_ln.gain"] = Parameter(np.ones(d))
        self.params["final_ln.bias"] = Parameter(np.zeros(d))
        self.params["out.w"] = Parameter(
            rng.standard_normal((d, cfg.vocab_size + 1)) / math.sqrt(d))
        self.params["out.b"] = Parameter(np.zeros(cfg.vocab_size + 1))
        for name, p in self.params.items():
            if not p.name:
                p.name = name
        self.last_min_preact = None

    @staticmethod
    def group_of(name):
        if name.startswith("conv."):
            return "conv"
        if name.startswith("layer"):
            return "transformer"
        if name.startswith("final_ln."):
            return "final_ln"
        return "output"

    def param_groups(self):
        groups = {"conv": [], "transformer": [], "final_ln": [], "output": []}
        for name, p in self.params.items():
            groups[self.group_of(name)].append(p)
        return groups

    def set_group_frozen(self, group, flag):
        for name, p in self.params.items():
            if self.group_of(name) == group:
                p.frozen = flag

    def encode(self, x):
        """[T_raw, f_in] features -> [T, d_model] acoustic representations."""
        cfg = self.cfg
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        if x.shape[0] < cfg.conv_width:
            raise NumericError(
                f"input of {x.shape[0]} frames shorter than conv width {cfg.conv_width}")
        h = nm.conv1d_strided(x, self.params["conv.kernel"].use(), cfg.conv_stride)
        h = nm.add(h, self.params["conv.bias"].use())
        h = nm.add(h, Tensor(sinusoid_table(h.shape[0], cfg.d_model)))
        min_pre = np.inf
        for i in range(cfg.n_layers):
            pre = f"layer{i}"
            a_in = nm.layer_norm(h, self.params[f"{pre}.ln1.gain"].use(),
                                 self.params[f"{pre}.ln1.bias"].use())
            attn = multi_head_attention(a_in, a_in, self.params,
                                        f"{pre}.attn", cfg.n_heads)
            h = nm.add(h, attn)
            f_in = nm.layer_norm(h, self.params[f"{pre}.ln2.gain"].use(),
                                 self.params[f"{pre}.ln2.bias"].use())
            preact = nm.add(nm.matmul(f_in, self.params[f"{pre}.ffn.w1"].use()),
                            self.params[f"{pre}.ffn.b1"].use())
            min_pre = min(min_pre, float(np.abs(preact.data).min()))
            ffn = nm.add(nm.matmul(nm.relu(preact), self.params[f"{pre}.ffn.w2"].use()),
                         self.params[f"{pre}.ffn.b2"].use())
            h = nm.add(h, ffn)
        self.last_min_preact = min_pre
        return nm.layer_norm(h, self.params["final_ln.gain"].use(),
                             self.params["final_ln.bias"].use())

    def log_posteriors(self, h):
        """[T, d_model] -> [T, V+1] log-softmax rows (blank = column 0)."""
        if h.shape[1] != self.cfg.d_model:
            raise NumericError("ctc head expects d_model-wide input")
        logits = nm.add(nm.matmul(h, self.params["out.w"].use()),
                        self.params["out.b"].use())
        return nm.log_softmax_rows(logits)

    def init_output_from_embeddings(self, table):
        """Token-wise init of the output projection from a teacher embedding
        table (rows indexed by token id); the blank column stays zero."""
        w = self.params["out.w"].tensor.data
        if table.shape[1] != w.shape[0]:
            return False
        for tok in range(1, self.cfg.vocab_size + 1):
            w[:, tok] = table[tok]
        w[:, 0] = 0.0
        return True

    def n_params(self):
        return sum(p.value.size for p in self.params.values())
