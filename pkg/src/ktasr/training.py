"""Multi-task trainer: weighted CTC + distillation loss, Adam with linear
warmup, delayed transformer unfreezing, early stopping, best-k checkpoint
averaging, and export of the distillation-free inference model."""

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import ctc, data as data_mod
from . import numerics as nm
from .encoder import Encoder
from .errors import ConfigError, DataError, NumericError
from .kt import KtModule
from .numerics import Tape, Tensor
from .teacher import build_teacher

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CKPT_MAGIC = b"KTCP"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    lam: float = 0.3
    lr_peak: float = 1e-3
    warmup_steps: int = 500
    freeze_encoder_until: int = 100
    max_epochs: int = 20
    patience: int = 3
    avg_best_k: int = 5
    batch_size: int = 8
    grad_accum: int = 1
    seed: int = 0
    kt_stop_gradient: bool = False
    select_by: str = "loss"

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda must lie in [0, 1]")
        for f in ("warmup_steps", "freeze_encoder_until", "max_epochs",
                  "patience", "avg_best_k", "batch_size", "grad_accum"):
            if getattr(self, f) < 0:
                raise ConfigError(f"{f} must be nonnegative")


def total_loss(l_ctc, l_kt, lam):
    """lambda * CTC + (1 - lambda) * distillation, as tape ops."""
    for l, what in ((l_ctc, "ctc loss"), (l_kt, "kt loss")):
        nm.check_finite(l, what)
    return nm.add(nm.scale(l_ctc, lam), nm.scale(l_kt, 1.0 - lam))


def lr_at(step, cfg):
    """Linear ramp 0 -> lr_peak over warmup_steps, then constant."""
    if step < 1:
        raise ConfigError("step counting starts at 1")
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    return cfg.lr_peak


class Adam:
    def __init__(self):
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, named_params, lr):
        self.t += 1
        for name, p in named_params.items():
            if p.frozen or p.tensor.grad is None:
                continue
            g = p.tensor.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(p.value)
                self.v[name] = np.zeros_like(p.value)
            m = self.m[name] = ADAM_BETA1 * self.m[name] + (1 - ADAM_BETA1) * g
            v = self.v[name] = ADAM_BETA2 * self.v[name] + (1 - ADAM_BETA2) * g * g
            mhat = m / (1 - ADAM_BETA1 ** self.t)
            vhat = v / (1 - ADAM_BETA2 ** self.t)
            p.tensor.data -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


class CaktModel:
    """Encoder + frozen teacher + optional knowledge-transfer branch.

    The teacher is built (and used to token-initialize the output
    projection) even when the transfer branch is off, so a pure-CTC run and
    a lambda=1 run start from bit-identical encoders.
    """

    def __init__(self, run_cfg):
        self.run_cfg = run_cfg
        seed = run_cfg["seed"]
        self.encoder_cfg = run_cfg.encoder_config()
        enc_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self.encoder = Encoder(self.encoder_cfg, enc_rng)
        self.teacher = build_teacher(run_cfg.teacher_config())
        self.encoder.init_output_from_embeddings(self.teacher.token_embeddings())
        self.kt_enabled = run_cfg["kt.enabled"]
        if self.kt_enabled:
            kt_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
            self.kt = KtModule(run_cfg.kt_config(), self.encoder_cfg.d_model,
                               self.encoder_cfg.vocab_size, kt_rng,
                               init_table=self.teacher.token_embeddings())
        else:
            self.kt = None

    def named_parameters(self):
        out = {f"encoder.{n}": p for n, p in self.encoder.params.items()}
        if self.kt is not None:
            out.update({f"kt.{n}": p for n, p in self.kt.params.items()})
        return out

    def load_params(self, params):
        own = self.named_parameters()
        for name, arr in params.items():
            if name in own:
                own[name].tensor.data = np.array(arr, dtype=np.float64)

    def zero_grads(self):
        for p in self.named_parameters().values():
            p.zero_grad()
        for p in self.teacher.params.values():
            p.zero_grad()


def unfreeze_schedule(update_count, cfg, model):
    """Conv front-end permanently frozen; transformer stack frozen until
    update_count exceeds freeze_encoder_until; teacher always frozen."""
    model.encoder.set_group_frozen("conv", True)
    model.encoder.set_group_frozen("transformer",
                                   update_count <= cfg.freeze_encoder_until)
    model.encoder.set_group_frozen("final_ln", False)
    model.encoder.set_group_frozen("output", False)


def utterance_losses(model, utt, lam, kt_stop_gradient=False, force_kt=False):
    """(l_ctc, l_kt, l_total) tensors for one utterance. The distillation
    branch is skipped on the tape when lambda == 1 (reported separately)."""
    feats = np.asarray(utt.features, dtype=np.float64)
    h = model.encoder.encode(feats)
    nm.check_finite(h, f"encoder output for utterance {utt.id}")
    log_post = model.encoder.log_posteriors(h)
    l_ctc = ctc.ctc_loss(log_post, utt.tokens, utt_id=utt.id)
    kt_on_tape = model.kt_enabled and (lam < 1.0 or force_kt)
    if kt_on_tape:
        states = model.teacher.encode(utt.tokens)
        acoustic = Tensor(h.data.copy()) if kt_stop_gradient else h
        kt_out = model.kt.forward(acoustic, utt.tokens, states.avg)
        l_kt = kt_out.loss
    else:
        l_kt = Tensor(0.0)
    try:
        l_total = total_loss(l_ctc, l_kt, lam) if lam < 1.0 else l_ctc
    except NumericError as e:
        raise NumericError(f"{e} (utterance {utt.id})") from e
    return l_ctc, l_kt, l_total


def _report_kt_loss(model, utt):
    """Distillation loss for metrics only, off the tape."""
    feats = np.asarray(utt.features, dtype=np.float64)
    h = model.encoder.encode(feats)
    states = model.teacher.encode(utt.tokens)
    return float(model.kt.forward(h, utt.tokens, states.avg).loss.data)


def train_step(model, micro_batches, cfg, opt, update_index):
    """One optimizer update over `micro_batches` (len == grad_accum), with
    gradients averaged across all utterances of the update."""
    unfreeze_schedule(update_index, cfg, model)
    model.zero_grads()
    n_accum = len(micro_batches)
    sums = {"l_ctc": 0.0, "l_kt": 0.0, "l_total": 0.0}
    n_utts = 0
    for micro in micro_batches:
        if not micro:
            raise DataError("empty micro-batch")
        with Tape() as tape:
            acc = None
            for utt in micro:
                l_ctc, l_kt, l_tot = utterance_losses(
                    model, utt, cfg.lam, kt_stop_gradient=cfg.kt_stop_gradient)
                if not np.isfinite(float(l_tot.data)):
                    raise NumericError(f"non-finite loss on utterance {utt.id}")
                sums["l_ctc"] += float(l_ctc.data)
                sums["l_kt"] += float(l_kt.data)
                sums["l_total"] += float(l_tot.data)
                acc = l_tot if acc is None else nm.add(acc, l_tot)
            batch_loss = nm.scale(acc, 1.0 / (len(micro) * n_accum))
            tape.backward(batch_loss)
        n_utts += len(micro)
    if model.kt_enabled and cfg.lam >= 1.0:
        sums["l_kt"] = sum(_report_kt_loss(model, u)
                           for micro in micro_batches for u in micro)
    grad_sq = 0.0
    for p in model.named_parameters().values():
        if not p.frozen and p.tensor.grad is not None:
            grad_sq += float((p.tensor.grad ** 2).sum())
    lr = lr_at(update_index, cfg)
    opt.step(model.named_parameters(), lr)
    return {
        "l_ctc": sums["l_ctc"] / n_utts,
        "l_kt": sums["l_kt"] / n_utts,
        "l_total": sums["l_total"] / n_utts,
        "lr": lr,
        "grad_norm": math.sqrt(grad_sq),
    }


def dev_loss(model, utts, cfg):
    """Mean per-utterance mixed loss, off the tape."""
    total = 0.0
    for utt in utts:
        _, _, l_tot = utterance_losses(model, utt, cfg.lam,
                                       kt_stop_gradient=cfg.kt_stop_gradient)
        total += float(l_tot.data)
    return total / len(utts)


def decode_utterance(encoder, utt):
    feats = np.asarray(utt.features, dtype=np.float64)
    log_post = encoder.log_posteriors(encoder.encode(feats))
    return ctc.greedy_decode(log_post)


# --- checkpoints -----------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict
    config_text: str
    update_count: int = 0
    epoch: int = 0
    dev_loss: float = math.inf
    opt_state: dict = field(default=None)  # {"t": int, "m": {...}, "v": {...}}

    @property
    def fingerprint(self):
        return hashlib.sha256(self.config_text.encode()).hexdigest()

    def n_params(self):
        return sum(a.size for a in self.params.values())


def _write_array(f, name, arr):
    nb = name.encode()
    f.write(struct.pack("<H", len(nb)))
    f.write(nb)
    arr = np.ascontiguousarray(arr, dtype="<f8")
    f.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(arr.tobytes())


def _read_array(f):
    (nlen,) = struct.unpack("<H", f.read(2))
    name = f.read(nlen).decode()
    (ndim,) = struct.unpack("<B", f.read(1))
    shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape).copy()
    return name, arr


def save_checkpoint(ckpt, path):
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        cb = ckpt.config_text.encode()
        f.write(struct.pack("<I", len(cb)))
        f.write(cb)
        f.write(struct.pack("<QId", ckpt.update_count, ckpt.epoch, ckpt.dev_loss))
        f.write(struct.pack("<I", len(ckpt.params)))
        for name in sorted(ckpt.params):
            _write_array(f, name, ckpt.params[name])
        if ckpt.opt_state is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            f.write(struct.pack("<Q", ckpt.opt_state["t"]))
            for kind in ("m", "v"):
                blob = ckpt.opt_state[kind]
                f.write(struct.pack("<I", len(blob)))
                for name in sorted(blob):
                    _write_array(f, name, blob[name])


def load_checkpoint(path):
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise DataError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CKPT_VERSION:
            raise DataError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<I", f.read(4))
        config_text = f.read(clen).decode()
        update_count, epoch, dev = struct.unpack("<QId", f.read(20))
        (n,) = struct.unpack("<I", f.read(4))
        params = dict(_read_array(f) for _ in range(n))
        (has_opt,) = struct.unpack("<B", f.read(1))
        opt_state = None
        if has_opt:
            (t,) = struct.unpack("<Q", f.read(8))
            opt_state = {"t": t}
            for kind in ("m", "v"):
                (k,) = struct.unpack("<I", f.read(4))
                opt_state[kind] = dict(_read_array(f) for _ in range(k))
    return Checkpoint(params=params, config_text=config_text,
                      update_count=update_count, epoch=epoch, dev_loss=dev,
                      opt_state=opt_state)


def snapshot(model, config_text, opt=None, update_count=0, epoch=0,
             dev=math.inf):
    params = {n: p.value.copy() for n, p in model.named_parameters().items()}
    opt_state = None
    if opt is not None:
        opt_state = {"t": opt.t,
                     "m": {k: v.copy() for k, v in opt.m.items()},
                     "v": {k: v.copy() for k, v in opt.v.items()}}
    return Checkpoint(params=params, config_text=config_text,
                      update_count=update_count, epoch=epoch, dev_loss=dev,
                      opt_state=opt_state)


def average_checkpoints(ckpts):
    """Parameter-wise arithmetic mean; refuses to mix config fingerprints."""
    if not ckpts:
        raise DataError("no checkpoints to average")
    fp = ckpts[0].fingerprint
    for c in ckpts[1:]:
        if c.fingerprint != fp:
            raise DataError("checkpoint config fingerprints differ; cannot average")
    names = ckpts[0].params.keys()
    params = {n: np.mean([c.params[n] for c in ckpts], axis=0) for n in names}
    best = min(ckpts, key=lambda c: c.dev_loss)
    return Checkpoint(params=params, config_text=ckpts[0].config_text,
                      update_count=best.update_count, epoch=best.epoch,
                      dev_loss=best.dev_loss)


def export_inference_model(ckpt):
    """Drop every non-encoder parameter; what remains is exactly the decode
    path (conv + transformer + final LN + output projection)."""
    params = {n: a.copy() for n, a in ckpt.params.items()
              if n.startswith("encoder.")}
    return Checkpoint(params=params, config_text=ckpt.config_text,
                      update_count=ckpt.update_count, epoch=ckpt.epoch,
                      dev_loss=ckpt.dev_loss)


def encoder_from_checkpoint(ckpt, encoder_cfg):
    """Inference-only encoder rebuilt from an (exported) checkpoint."""
    enc = Encoder(encoder_cfg, np.random.default_rng(0))
    for name, p in enc.params.items():
        key = f"encoder.{name}"
        if key not in ckpt.params:
            raise DataError(f"checkpoint is missing parameter {key}")
        p.tensor.data = np.array(ckpt.params[key], dtype=np.float64)
        p.frozen = True
    return enc


def early_stop_epoch(dev_history, patience):
    """Index after which training should stop, or None to continue: stop
    when the dev metric has failed to improve for `patience` epochs."""
    best = math.inf
    since = 0
    for i, v in enumerate(dev_history):
        if v < best:
            best = v
            since = 0
        else:
            since += 1
        if since >= patience:
            return i
    return None


def run_training(run_cfg, data_dir, run_dir, quiet=True):
    """Full training run; writes metrics JSONL, per-epoch checkpoints, the
    best-k average, and the exported inference model into run_dir."""
    os.makedirs(run_dir, exist_ok=True)
    cfg = run_cfg.train_config()
    config_text = run_cfg.canonical_text()
    with open(os.path.join(run_dir, "config.txt"), "w") as f:
        f.write(config_text)

    train_utts = data_mod.read_manifest(os.path.join(data_dir, "train.jsonl"))
    dev_utts = data_mod.read_manifest(os.path.join(data_dir, "dev.jsonl"))
    model = CaktModel(run_cfg)
    opt = Adam()

    metrics_path = os.path.join(run_dir, "metrics.jsonl")
    history = []     # selection metric per epoch
    dev_losses = []
    ckpt_paths = []
    update_count = 0
    epoch_curve = []
    with open(metrics_path, "w") as mf:
        for epoch in range(1, cfg.max_epochs + 1):
            batches = data_mod.batch_order(train_utts, cfg.batch_size,
                                           cfg.seed, epoch)
            accum = max(1, cfg.grad_accum)
            epoch_tot = 0.0
            n_steps = 0
            for i in range(0, len(batches), accum):
                group = batches[i:i + accum]
                update_count += 1
                m = train_step(model, group, cfg, opt, update_count)
                m.update({"step": update_count, "epoch": epoch})
                mf.write(json.dumps(m) + "\n")
                epoch_tot += m["l_total"]
                n_steps += 1
            d_loss = dev_loss(model, dev_utts, cfg)
            dev_losses.append(d_loss)
            if cfg.select_by == "cer":
                rep = data_mod.cer(dev_utts,
                                   lambda u: decode_utterance(model.encoder, u))
                metric = rep["cer"]
            else:
                metric = d_loss
            history.append(metric)
            epoch_curve.append({"epoch": epoch, "train_loss": epoch_tot / max(n_steps, 1),
                                "dev_loss": d_loss, "dev_metric": metric})
            ck = snapshot(model, config_text, opt=opt,
                          update_count=update_count, epoch=epoch, dev=metric)
            path = os.path.join(run_dir, f"ckpt_ep{epoch:03d}.bin")
            save_checkpoint(ck, path)
            ckpt_paths.append(path)
            if not quiet:
                print(f"epoch {epoch}: train {epoch_curve[-1]['train_loss']:.4f} "
                      f"dev {d_loss:.4f}")
            if early_stop_epoch(history, cfg.patience) is not None:
                break

    order = np.argsort(history, kind="stable")[:max(1, cfg.avg_best_k)]
    best = [load_checkpoint(ckpt_paths[i]) for i in sorted(order)]
    final = average_checkpoints(best)
    final_path = os.path.join(run_dir, "model_final.bin")
    save_checkpoint(final, final_path)
    infer = export_inference_model(final)
    infer_path = os.path.join(run_dir, "model_infer.bin")
    save_checkpoint(infer, infer_path)

    with open(os.path.join(run_dir, "epochs.jsonl"), "w") as f:
        for rec in epoch_curve:
            f.write(json.dumps(rec) + "\n")
    summary = {
        "epochs_run": len(history),
        "dev_losses": dev_losses,
        "dev_metrics": history,
        "best_epochs": [int(i) + 1 for i in sorted(order)],
        "final_checkpoint": final_path,
        "inference_model": infer_path,
        "metrics": metrics_path,
    }
    with open(os.path.join(run_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=1)
    return summary
