import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ktasr import numerics as nm
from ktasr.errors import ConfigError
from ktasr.kt import (KtConfig, KtModule, QueryMode, ShiftMode, align_pairs,
                      kt_loss)
from ktasr.numerics import Parameter, Tensor, finite_difference_check


def make_module(seed=0, mode=QueryMode.TOKEN_PLUS_POSITIONAL,
                shift=ShiftMode.NONE, d=8, v=4):
    cfg = KtConfig(query_mode=mode, shift_mode=shift, n_heads=2)
    return KtModule(cfg, d, v, np.random.default_rng(seed))


def test_k_must_be_positive():
    with pytest.raises(ConfigError):
        KtConfig(k=0.0)


def test_positional_only_queries_ignore_tokens():
    m = make_module(mode=QueryMode.POSITIONAL_ONLY)
    e1 = m.build_queries([1, 2, 3])
    e2 = m.build_queries([4, 4, 4])
    np.testing.assert_array_equal(e1.data, e2.data)


def test_token_queries_depend_on_tokens():
    m = make_module()
    e1 = m.build_queries([1, 2, 3])
    e2 = m.build_queries([1, 4, 3])
    assert not np.allclose(e1.data, e2.data)
    assert not np.allclose(e1.data[2], e2.data[2])


def test_align_pairs_right_shift_lattice():
    assert align_pairs(4, ShiftMode.RIGHT) == [(1, 2), (2, 3), (3, 4)]


def test_align_pairs_identity():
    assert align_pairs(4, ShiftMode.NONE) == [(1, 1), (2, 2), (3, 3), (4, 4)]


def test_align_pairs_boundary_drop():
    assert align_pairs(1, ShiftMode.LEFT) == []
    assert align_pairs(1, ShiftMode.RIGHT) == []


def test_left_right_symmetry():
    for n in range(1, 7):
        right = align_pairs(n, ShiftMode.RIGHT)
        left = align_pairs(n, ShiftMode.LEFT)
        assert sorted((m_, n_) for n_, m_ in right) == sorted(left)


def test_kt_loss_identical_rows_is_zero():
    rows = np.random.default_rng(0).standard_normal((4, 6))
    loss = kt_loss(rows, Tensor(rows.copy()), align_pairs(2, ShiftMode.NONE), 20.0)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_kt_loss_orthogonal_rows():
    h = np.zeros((4, 4))
    o = np.zeros((4, 4))
    h[1, 0] = h[2, 1] = 1.0
    o[1, 2] = o[2, 3] = 1.0
    loss = kt_loss(h, Tensor(o), align_pairs(2, ShiftMode.NONE), 20.0)
    assert loss.item() == pytest.approx(40.0, abs=1e-12)


def test_kt_loss_empty_pairs_is_zero():
    loss = kt_loss(np.zeros((3, 4)), Tensor(np.ones((3, 4))), [], 20.0)
    assert loss.item() == 0.0


def test_kt_loss_matches_naive_recomputation():
    rng = np.random.default_rng(1)
    h = rng.standard_normal((6, 5))
    o = rng.standard_normal((6, 5))
    pairs = align_pairs(4, ShiftMode.RIGHT)
    loss = kt_loss(h, Tensor(o), pairs, 20.0).item()
    naive = 20.0 * sum(
        1 - h[n] @ o[m] / (np.linalg.norm(h[n]) * np.linalg.norm(o[m]))
        for n, m in pairs)
    assert loss == pytest.approx(naive, abs=1e-12)


def test_kt_loss_scale_invariance():
    rng = np.random.default_rng(2)
    h = rng.standard_normal((5, 4))
    o = Tensor(rng.standard_normal((5, 4)))
    pairs = align_pairs(3, ShiftMode.NONE)
    base = kt_loss(h, o, pairs, 20.0).item()
    scaled = kt_loss(3.7 * h, o, pairs, 20.0).item()
    assert scaled == pytest.approx(base, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.sampled_from(list(ShiftMode)),
       st.integers(0, 2 ** 31 - 1))
def test_kt_loss_bounds(n, shift, seed):
    rng = np.random.default_rng(seed)
    h = rng.standard_normal((n + 2, 4))
    o = Tensor(rng.standard_normal((n + 2, 4)))
    pairs = align_pairs(n, shift)
    loss = kt_loss(h, o, pairs, 20.0).item()
    assert -1e-12 <= loss <= 2 * 20.0 * len(pairs) + 1e-9


def test_single_frame_attention_output_constant():
    m = make_module()
    acoustic = Tensor(np.random.default_rng(3).standard_normal((1, 8)))
    e = m.build_queries([1, 2])
    o = m.cross_attention(e, acoustic)
    for row in o.data:
        np.testing.assert_allclose(row, o.data[0], atol=1e-12)


def test_cross_attention_weight_rows_sum_to_one():
    m = make_module()
    acoustic = Tensor(np.random.default_rng(4).standard_normal((6, 8)))
    sink = []
    m.cross_attention(m.build_queries([1, 2, 3]), acoustic, attn_sink=sink)
    for a in sink:
        np.testing.assert_allclose(a.data.sum(axis=1), 1.0, atol=1e-12)


def test_gradient_through_cross_attention_and_loss():
    m = make_module(shift=ShiftMode.RIGHT)
    rng = np.random.default_rng(5)
    acoustic = Parameter(rng.standard_normal((5, 8)))
    h_avg = rng.standard_normal((4, 8))

    def loss_fn():
        out = m.forward(acoustic.use(), [1, 2], h_avg)
        return out.loss

    groups = {"kt": list(m.params.values()), "acoustic": [acoustic]}
    report = finite_difference_check(loss_fn, groups, eps=1e-5, tol=1e-4)
    assert all(r["status"] == "ok" for r in report.values()), report


def test_no_shift_token_queries_is_identity_alignment_baseline():
    m = make_module(mode=QueryMode.TOKEN_PLUS_POSITIONAL, shift=ShiftMode.NONE)
    out = m.forward(Tensor(np.random.default_rng(6).standard_normal((5, 8))),
                    [1, 2, 3], np.random.default_rng(7).standard_normal((5, 8)))
    assert out.pairs == [(1, 1), (2, 2), (3, 3)]


def test_pair_counts():
    for n in range(1, 7):
        assert len(align_pairs(n, ShiftMode.NONE)) == n
        assert len(align_pairs(n, ShiftMode.LEFT)) == max(0, n - 1)
        assert len(align_pairs(n, ShiftMode.RIGHT)) == max(0, n - 1)
