import numpy as np
import pytest

from ktasr import ctc
from ktasr.errors import CtcInfeasibleError, NumericError
from ktasr.numerics import Parameter, Tensor, finite_difference_check, log_softmax_rows
from ktasr.verify import random_ctc_instance


def uniform_log_post(t, v):
    return np.log(np.full((t, v + 1), 1.0 / (v + 1)))


def test_hand_enumerated_case():
    # T=2 over {blank, a}, every cell 0.5; paths (a,a),(a,-),(-,a) => P=0.75
    loss = ctc.ctc_loss(Tensor(uniform_log_post(2, 1)), [1])
    assert loss.item() == pytest.approx(-np.log(0.75), abs=1e-10)


def test_certainty_case_zero_loss():
    lp = np.log(np.array([[1e-300, 1.0 - 1e-300]]))
    loss = ctc.ctc_loss(Tensor(lp), [1])
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_infeasible_reports_utt_id():
    with pytest.raises(CtcInfeasibleError, match="utt-7"):
        ctc.ctc_loss(Tensor(uniform_log_post(2, 2)), [1, 1], utt_id="utt-7")


def test_oracle_same_hand_case():
    assert ctc.ctc_oracle(uniform_log_post(2, 1), [1]) == pytest.approx(
        -np.log(0.75), abs=1e-10)


def test_oracle_unreachable_is_infinite():
    assert ctc.ctc_oracle(uniform_log_post(2, 2), [1, 2, 1]) == np.inf


def test_oracle_guard():
    with pytest.raises(NumericError):
        ctc.ctc_oracle(np.zeros((30, 5)), [1])


def test_oracle_equivalence_sweep():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        log_post, labels = random_ctc_instance(rng)
        a = float(ctc.ctc_loss(Tensor(log_post), labels).data)
        b = ctc.ctc_oracle(log_post, labels)
        assert abs(a - b) < 1e-8


def test_gradient_vs_finite_differences():
    rng = np.random.default_rng(7)
    logits = Parameter(rng.standard_normal((6, 4)))

    def loss_fn():
        return ctc.ctc_loss(log_softmax_rows(logits.use()), [1, 2, 2])

    report = finite_difference_check(loss_fn, {"logits": [logits]},
                                     eps=1e-5, tol=1e-5)
    assert report["logits"]["status"] == "ok", report


def test_monotonicity_single_path():
    # T=2, labels [1,2]: the only path is (1,2); raising p(1 at t=0) with
    # row renormalization cannot increase the loss
    base = np.array([[0.2, 0.5, 0.3], [0.3, 0.2, 0.5]])
    prev = None
    for boost in np.linspace(0.0, 2.0, 9):
        probs = base.copy()
        probs[0, 1] *= np.exp(boost)
        probs /= probs.sum(axis=1, keepdims=True)
        loss = float(ctc.ctc_loss(Tensor(np.log(probs)), [1, 2]).data)
        if prev is not None:
            assert loss <= prev + 1e-12
        prev = loss


def test_collapse_rules():
    assert ctc.collapse([1, 1, 0, 1, 2, 2]) == [1, 1, 2]
    assert ctc.collapse([0, 0, 0]) == []
    assert ctc.collapse([2, 0, 2]) == [2, 2]


def test_collapse_idempotent_on_blank_free_paths():
    # once blanks are gone, the output has no adjacent repeats, so a second
    # collapse is a no-op
    rng = np.random.default_rng(8)
    for _ in range(50):
        path = rng.integers(1, 4, size=rng.integers(1, 12)).tolist()
        once = ctc.collapse(path)
        assert ctc.collapse(once) == once


def test_greedy_decode():
    rows = np.full((4, 3), -10.0)
    for t, sym in enumerate([1, 1, 0, 2]):
        rows[t, sym] = 0.0
    assert ctc.greedy_decode(Tensor(rows)) == [1, 2]


def test_greedy_decode_all_blank():
    rows = np.zeros((3, 4))
    rows[:, 0] = 1.0
    assert ctc.greedy_decode(Tensor(rows)) == []


def test_greedy_tie_breaks_to_lowest_id():
    rows = np.array([[0.5, 0.5, 0.1]])
    assert ctc.greedy_decode(Tensor(np.log(rows))) == []  # blank wins the tie
