"""Synthetic corpus generation, manifest/vocab serialization, batching
order, and character-error-rate scoring.

Each token owns a seeded unit-norm prototype vector; an utterance renders
its token sequence as repeated noisy prototypes with optional silence
frames. Features are stored as little-endian float32 (base64 in JSONL)
and promoted to float64 in compute.
"""

import base64
import json
import string
from dataclasses import dataclass, field

import numpy as np

from . import ctc
from .errors import ConfigError, DataError


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # float32, [T_raw, f_in]
    tokens: list

    @property
    def n_frames(self):
        return self.features.shape[0]


@dataclass
class SynthConfig:
    vocab_size: int = 16
    f_in: int = 20
    frames_per_token_min: int = 2
    frames_per_token_max: int = 5
    noise_sigma: float = 0.1
    silence_prob: float = 0.1
    n_train: int = 800
    n_dev: int = 100
    n_test: int = 100
    seq_len_min: int = 3
    seq_len_max: int = 10
    seed: int = 0
    # feasibility is checked against this front-end geometry
    conv_width: int = 3
    conv_stride: int = 2

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.frames_per_token_min > self.frames_per_token_max or self.frames_per_token_min < 1:
            raise ConfigError("frames_per_token range is empty or invalid")
        if self.seq_len_min > self.seq_len_max or self.seq_len_min < 1:
            raise ConfigError("seq_len range is empty or invalid")
        # best case (max frames, no repeats) must survive conv subsampling
        n = self.seq_len_max
        t_raw = n * self.frames_per_token_max
        t_out = (t_raw - self.conv_width) // self.conv_stride + 1
        if t_raw < self.conv_width or t_out < n:
            raise ConfigError(
                "infeasible config: even at frames_per_token_max the longest "
                f"sequence yields {t_out} frames after subsampling for {n} labels; "
                "CTC needs at least one frame per label")


class Vocab:
    """Bijective id<->glyph table. Reserved: 0=blank, V+1=BOS, V+2=EOS;
    reserved ids never appear in utterance token sequences."""

    BLANK_GLYPH = "<blk>"
    BOS_GLYPH = "<bos>"
    EOS_GLYPH = "<eos>"

    def __init__(self, vocab_size):
        self.vocab_size = vocab_size
        letters = string.ascii_lowercase
        self._glyphs = {0: self.BLANK_GLYPH,
                        vocab_size + 1: self.BOS_GLYPH,
                        vocab_size + 2: self.EOS_GLYPH}
        for i in range(1, vocab_size + 1):
            self._glyphs[i] = letters[i - 1] if i <= 26 else f"t{i}"

    def glyph(self, token_id):
        return self._glyphs[token_id]

    def text(self, tokens):
        return " ".join(self.glyph(t) for t in tokens)

    def to_json(self):
        return {str(k): v for k, v in sorted(self._glyphs.items())}

    @classmethod
    def from_json(cls, mapping):
        ids = sorted(int(k) for k in mapping)
        v = cls(max(ids) - 2)
        for k, g in mapping.items():
            if v._glyphs[int(k)] != g:
                v._glyphs[int(k)] = g
        return v

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))


def _render_utterance(rng, cfg, prototypes, utt_id):
    n = int(rng.integers(cfg.seq_len_min, cfg.seq_len_max + 1))
    tokens = rng.integers(1, cfg.vocab_size + 1, size=n).tolist()
    need = ctc.required_frames(tokens)
    for attempt in range(51):
        if attempt < 50:
            reps = rng.integers(cfg.frames_per_token_min,
                                cfg.frames_per_token_max + 1, size=n)
        else:
            reps = np.full(n, cfg.frames_per_token_max)
        sil = rng.random(n) < cfg.silence_prob
        t_raw = int(reps.sum() + sil.sum())
        t_out = (t_raw - cfg.conv_width) // cfg.conv_stride + 1
        if t_raw >= cfg.conv_width and t_out >= need:
            break
    else:
        raise DataError(
            f"cannot render a CTC-feasible utterance for {tokens}: needs "
            f"{need} subsampled frames; raise frames_per_token")
    rows = []
    for tok, r, s in zip(tokens, reps, sil):
        rows.append(prototypes[tok] + rng.normal(0.0, cfg.noise_sigma, (int(r), cfg.f_in)))
        if s:
            rows.append(rng.normal(0.0, cfg.noise_sigma, (1, cfg.f_in)))
    feats = np.concatenate(rows, axis=0).astype(np.float32)
    return Utterance(id=utt_id, features=feats, tokens=tokens)


def generate_corpus(cfg: SynthConfig):
    """Returns {"train": [...], "dev": [...], "test": [...]}, plus the vocab,
    deterministically from cfg.seed. Split ids are disjoint by prefix."""
    root = np.random.SeedSequence([cfg.seed, 101])
    proto_rng, train_ss, dev_ss, test_ss = [np.random.default_rng(s)
                                            for s in root.spawn(4)]
    prototypes = {}
    for tok in range(1, cfg.vocab_size + 1):
        v = proto_rng.standard_normal(cfg.f_in)
        prototypes[tok] = v / np.linalg.norm(v)
    splits = {}
    for name, rng, count in (("train", train_ss, cfg.n_train),
                             ("dev", dev_ss, cfg.n_dev),
                             ("test", test_ss, cfg.n_test)):
        splits[name] = [_render_utterance(rng, cfg, prototypes, f"{name}-{i:05d}")
                        for i in range(count)]
    return splits, Vocab(cfg.vocab_size)


def write_manifest(utts, path):
    with open(path, "w") as f:
        for u in sorted(utts, key=lambda u: u.id):
            feats = np.ascontiguousarray(u.features.astype("<f4"))
            rec = {
                "id": u.id,
                "tokens": list(map(int, u.tokens)),
                "features_b64": base64.b64encode(feats.tobytes()).decode("ascii"),
                "T": int(feats.shape[0]),
                "f": int(feats.shape[1]),
            }
            f.write(json.dumps(rec) + "\n")


def read_manifest(path):
    utts = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            raw = base64.b64decode(rec["features_b64"])
            feats = np.frombuffer(raw, dtype="<f4").reshape(rec["T"], rec["f"]).copy()
            utts.append(Utterance(id=rec["id"], features=feats,
                                  tokens=list(rec["tokens"])))
    return utts


def batch_order(utts, batch_size, seed, epoch):
    """Sort by length then id, chunk, and shuffle chunk order with the run
    seed; deterministic across reruns."""
    order = sorted(utts, key=lambda u: (u.n_frames, u.id))
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919, epoch]))
    rng.shuffle(batches)
    return batches


def levenshtein(ref, hyp):
    """(substitutions, insertions, deletions) with unit costs; ties in the
    traceback prefer substitution, then insertion, then deletion."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            ins = d[i, j - 1] + 1
            dele = d[i - 1, j] + 1
            d[i, j] = min(sub, ins, dele)
    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and d[i, j] == d[i, j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return int(subs), int(ins), int(dels)


def cer(utts, decode_fn):
    """Corpus CER = (S+I+D) / total reference tokens, with per-utterance
    details. decode_fn maps an Utterance to hypothesis token ids."""
    if not utts:
        raise DataError("empty manifest")
    totals = {"subs": 0, "ins": 0, "dels": 0, "n_ref_tokens": 0}
    per_utt = []
    for u in sorted(utts, key=lambda u: u.id):
        hyp = decode_fn(u)
        s, i, d = levenshtein(u.tokens, hyp)
        totals["subs"] += s
        totals["ins"] += i
        totals["dels"] += d
        totals["n_ref_tokens"] += len(u.tokens)
        per_utt.append({"id": u.id, "subs": s, "ins": i, "dels": d,
                        "n_ref": len(u.tokens), "hyp": list(map(int, hyp))})
    errs = totals["subs"] + totals["ins"] + totals["dels"]
    return {
        "cer": errs / totals["n_ref_tokens"],
        **totals,
        "per_utt": per_utt,
    }


def score_hypotheses(refs, hyps):
    """CER for pre-computed hypotheses, matched by utterance id."""
    ref_by_id = {u.id: u.tokens for u in refs}
    missing = set(ref_by_id) - set(hyps)
    if missing:
        raise DataError(f"hypotheses missing for {sorted(missing)[:3]}...")
    return cer(refs, lambda u: hyps[u.id])
