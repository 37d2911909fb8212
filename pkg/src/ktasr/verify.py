"""Self-verification suites run by `ktasr verify` and the acceptance tests:
CTC-vs-oracle sweep, full-model gradient audit, and distillation-loss
property checks."""

import numpy as np

from . import ctc, kt as kt_mod
from . import numerics as nm
from .config import RunConfig
from .data import SynthConfig, generate_corpus
from .errors import VerificationError
from .kt import ShiftMode, align_pairs
from .numerics import Tensor, finite_difference_check
from .training import CaktModel, unfreeze_schedule, utterance_losses

TINY_OVERRIDES = {
    "encoder.d_model": 16,
    "encoder.n_layers": 1,
    "encoder.n_heads": 2,
    "encoder.ffn_dim": 16,
    "encoder.feat_dim": 4,
    "encoder.vocab_size": 3,
    "teacher.n_layers": 1,
    "teacher.n_heads": 2,
    "kt.n_heads": 2,
    "kt.shift": "right",
    "train.lambda": 0.3,
}


def random_ctc_instance(rng):
    T = int(rng.integers(2, 7))
    V = int(rng.integers(1, 4))
    logits = rng.standard_normal((T, V + 1))
    log_post = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    while True:
        N = int(rng.integers(1, 4))
        labels = rng.integers(1, V + 1, size=N).tolist()
        if ctc.required_frames(labels) <= T:
            return log_post, labels


def verify_ctc_oracle(n_instances=100, seed=12345, tol=1e-8):
    """Forward-backward loss equals exhaustive path enumeration."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        log_post, labels = random_ctc_instance(rng)
        a = float(ctc.ctc_loss(Tensor(log_post), labels).data)
        b = ctc.ctc_oracle(log_post, labels)
        worst = max(worst, abs(a - b))
    return {"ok": worst < tol, "max_abs_diff": worst, "instances": n_instances}


def _tiny_gradcheck_setup(seed):
    cfg = RunConfig(dict(TINY_OVERRIDES, seed=seed))
    model = CaktModel(cfg)
    synth = SynthConfig(vocab_size=3, f_in=4, seq_len_min=2, seq_len_max=3,
                        n_train=2, n_dev=1, n_test=1, seed=seed)
    splits, _ = generate_corpus(synth)
    batch = splits["train"]
    tcfg = cfg.train_config()
    # audit past the unfreeze point so the transformer group is checked too
    unfreeze_schedule(tcfg.freeze_encoder_until + 1, tcfg, model)

    def loss_fn():
        acc = None
        for utt in batch:
            _, _, l_tot = utterance_losses(model, utt, cfg.train_config().lam)
            acc = l_tot if acc is None else nm.add(acc, l_tot)
        return nm.scale(acc, 1.0 / len(batch))

    return model, batch, loss_fn


def verify_gradcheck(tol=1e-4, eps=1e-5, seed=3):
    """Finite-difference audit of the full multi-task loss on a 2-utterance
    batch, per parameter group. Seeds are re-sampled while any ReLU
    pre-activation sits within 1e-6 of its kink."""
    for attempt in range(10):
        model, batch, loss_fn = _tiny_gradcheck_setup(seed + attempt)
        loss_fn()
        if model.encoder.last_min_preact > 1e-6:
            break
    groups = dict(model.encoder.param_groups())
    groups["kt"] = list(model.kt.params.values())
    groups["teacher"] = list(model.teacher.params.values())
    report = finite_difference_check(loss_fn, groups, eps=eps, tol=tol)
    ok = all(r["status"] in ("ok", "skipped (frozen)") for r in report.values())
    return {"ok": ok, "groups": report}


def verify_kt_props(n_draws=1000, seed=99):
    """Bounds 0 <= loss <= 2k|pairs|, positive-scaling invariance of teacher
    rows, and the shift-alignment lattices for N in 1..6."""
    rng = np.random.default_rng(seed)
    failures = []
    k = 20.0
    for i in range(n_draws):
        n = int(rng.integers(1, 7))
        d = 8
        h = rng.standard_normal((n + 2, d))
        o = Tensor(rng.standard_normal((n + 2, d)))
        shift = [ShiftMode.NONE, ShiftMode.LEFT, ShiftMode.RIGHT][i % 3]
        pairs = align_pairs(n, shift)
        loss = float(kt_mod.kt_loss(h, o, pairs, k).data)
        if not -1e-12 <= loss <= 2 * k * len(pairs) + 1e-9:
            failures.append(f"bound violated at draw {i}: {loss}")
        scaled = float(kt_mod.kt_loss(h * 3.7, o, pairs, k).data)
        if abs(scaled - loss) > 1e-12 * max(1.0, abs(loss)):
            failures.append(f"scaling invariance violated at draw {i}")
    for n in range(1, 7):
        for shift, want in ((ShiftMode.NONE, n),
                            (ShiftMode.LEFT, max(0, n - 1)),
                            (ShiftMode.RIGHT, max(0, n - 1))):
            pairs = align_pairs(n, shift)
            if len(pairs) != want:
                failures.append(f"pair count N={n} shift={shift}: {len(pairs)}")
            for t, s in pairs:
                if s != t + shift.value or not (1 <= s <= n and 1 <= t <= n):
                    failures.append(f"bad pair ({t},{s}) N={n} shift={shift}")
    return {"ok": not failures, "failures": failures[:10], "draws": n_draws}


SUITES = {
    "ctc-oracle": verify_ctc_oracle,
    "gradcheck": verify_gradcheck,
    "kt-props": verify_kt_props,
}


def run_suite(name):
    if name not in SUITES:
        raise VerificationError(f"unknown verify suite {name!r}; "
                                f"choose from {sorted(SUITES)}")
    return SUITES[name]()
