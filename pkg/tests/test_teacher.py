import numpy as np
import pytest

from ktasr import kt as kt_mod
from ktasr.errors import ConfigError, DataError
from ktasr.numerics import Tape, Tensor
from ktasr.teacher import (Teacher, TeacherConfig, TeacherStates, build_teacher,
                           layer_average)


def small_cfg(**kw):
    base = dict(d_teacher=8, n_layers=2, n_heads=2, vocab_size=4, seed=7)
    base.update(kw)
    return TeacherConfig(**base)


def checksum(teacher):
    return hash(teacher.params["layer0.attn.wq"].value.tobytes())


def test_same_seed_same_weights():
    assert checksum(build_teacher(small_cfg())) == checksum(build_teacher(small_cfg()))


def test_different_seed_different_weights():
    assert checksum(build_teacher(small_cfg(seed=7))) != checksum(
        build_teacher(small_cfg(seed=8)))


def test_all_parameters_frozen():
    t = build_teacher(small_cfg())
    assert all(p.frozen for p in t.params.values())


def test_state_shapes():
    t = build_teacher(small_cfg())
    states = t.encode([1])
    assert len(states.layers) == 3  # embeddings + 2 layers
    for layer in states.layers:
        assert layer.shape == (3, 8)
    assert states.avg.shape == (3, 8)


def test_empty_tokens_rejected():
    with pytest.raises(DataError):
        build_teacher(small_cfg()).encode([])


def test_out_of_vocab_rejected():
    with pytest.raises(DataError):
        build_teacher(small_cfg()).encode([5])


def test_identity_layers_average_to_input():
    states = TeacherStates(layers=[np.arange(6.0).reshape(3, 2)] * 4)
    np.testing.assert_array_equal(states.avg, states.layers[0])


def test_layer_average_arithmetic():
    m = np.random.default_rng(0).standard_normal((3, 4))
    states = TeacherStates(layers=[np.zeros((3, 4)), 2 * m])
    np.testing.assert_allclose(states.avg, m, atol=1e-15)


def test_layer_average_matches_naive_summation():
    rng = np.random.default_rng(1)
    layers = [rng.standard_normal((4, 5)) for _ in range(6)]
    naive = sum(layers) / 6
    np.testing.assert_allclose(layer_average(TeacherStates(layers=layers)),
                               naive, atol=1e-12)


def test_contextuality_of_random_teacher():
    t = build_teacher(small_cfg(seed=7))
    a = t.encode([1, 2])
    b = t.encode([1, 3])
    # representation of the first token differs at some layer >= 1
    assert any(not np.allclose(la[1], lb[1])
               for la, lb in zip(a.layers[1:], b.layers[1:]))


def test_bit_stability_across_builds():
    a = build_teacher(small_cfg()).encode([2, 3, 1]).avg.tobytes()
    b = build_teacher(small_cfg()).encode([2, 3, 1]).avg.tobytes()
    assert a == b


def test_no_gradient_into_teacher():
    t = build_teacher(small_cfg())
    kt = kt_mod.KtModule(kt_mod.KtConfig(n_heads=2), 8, 4,
                         np.random.default_rng(2))
    acoustic = Tensor(np.random.default_rng(3).standard_normal((5, 8)))
    with Tape() as tape:
        states = t.encode([1, 2])
        out = kt.forward(acoustic, [1, 2], states.avg)
        tape.backward(out.loss)
    for p in t.params.values():
        assert np.all(p.grad == 0.0)


def test_oracle_mode_rows():
    cfg = small_cfg(d_teacher=16, mode="oracle")
    t = build_teacher(cfg)
    states = t.encode([1, 2])
    row = states.avg[1]  # token 1, neighbors BOS(5) and token 2
    assert row[1] == pytest.approx(0.7)
    assert row[cfg.bos_id] == pytest.approx(0.15)
    assert row[2] == pytest.approx(0.15)


def test_oracle_mode_needs_room_for_one_hots():
    with pytest.raises(ConfigError):
        TeacherConfig(d_teacher=8, n_heads=2, vocab_size=8, mode="oracle")
