import numpy as np
import pytest

from ktasr import ctc
from ktasr import numerics as nm
from ktasr.encoder import Encoder, EncoderConfig, multi_head_attention, sinusoid_table
from ktasr.errors import ConfigError, NumericError
from ktasr.numerics import Parameter, Tape, Tensor, finite_difference_check


def small_cfg(**kw):
    base = dict(d_model=8, n_layers=1, n_heads=2, ffn_dim=8, conv_width=3,
                conv_stride=2, feat_dim=4, vocab_size=3)
    base.update(kw)
    return EncoderConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(d_model=10, n_heads=4)
    with pytest.raises(ConfigError):
        EncoderConfig(n_layers=0)


def test_output_length_formula():
    enc = Encoder(small_cfg(), np.random.default_rng(0))
    h = enc.encode(np.zeros((3, 4)))
    assert h.shape == (1, 8)
    h = enc.encode(np.random.default_rng(1).standard_normal((10, 4)))
    assert h.shape == (4, 8)


def test_input_too_short():
    enc = Encoder(small_cfg(), np.random.default_rng(0))
    with pytest.raises(NumericError):
        enc.encode(np.zeros((2, 4)))


def test_head_is_separate_from_encode():
    # zeroing the output projection changes log-posteriors, not H
    enc = Encoder(small_cfg(), np.random.default_rng(0))
    x = np.random.default_rng(2).standard_normal((7, 4))
    before = enc.encode(x).data.copy()
    enc.params["out.w"].tensor.data[:] = 0.0
    enc.params["out.b"].tensor.data[:] = 0.0
    np.testing.assert_array_equal(enc.encode(x).data, before)
    lp = enc.log_posteriors(enc.encode(x))
    np.testing.assert_allclose(lp.data, -np.log(4.0), atol=1e-12)


def test_log_posterior_rows_normalize():
    enc = Encoder(small_cfg(), np.random.default_rng(3))
    x = np.random.default_rng(4).standard_normal((9, 4))
    lp = enc.log_posteriors(enc.encode(x))
    np.testing.assert_allclose(np.exp(lp.data).sum(axis=1), 1.0, atol=1e-12)


def test_permutation_sensitivity():
    enc = Encoder(small_cfg(), np.random.default_rng(5))
    rng = np.random.default_rng(6)
    x = rng.standard_normal((9, 4))
    shuffled = x[rng.permutation(9)]
    assert not np.allclose(enc.encode(x).data, enc.encode(shuffled).data)


def test_deterministic_bit_for_bit():
    x = np.random.default_rng(7).standard_normal((9, 4))
    outs = []
    for _ in range(2):
        enc = Encoder(small_cfg(), np.random.default_rng(8))
        outs.append(enc.encode(x).data.tobytes())
    assert outs[0] == outs[1]


def test_freeze_conv_zeroes_its_grads_only():
    enc = Encoder(small_cfg(), np.random.default_rng(9))
    enc.set_group_frozen("conv", True)
    x = np.random.default_rng(10).standard_normal((9, 4))
    with Tape() as tape:
        loss = ctc.ctc_loss(enc.log_posteriors(enc.encode(x)), [1, 2])
        tape.backward(loss)
    assert np.all(enc.params["conv.kernel"].grad == 0.0)
    assert np.any(enc.params["layer0.attn.wq"].grad != 0.0)


def test_full_pipeline_gradient_check():
    enc = Encoder(small_cfg(), np.random.default_rng(11))
    x = np.random.default_rng(12).standard_normal((9, 4))

    def loss_fn():
        return ctc.ctc_loss(enc.log_posteriors(enc.encode(x)), [1, 2, 3])

    report = finite_difference_check(loss_fn, enc.param_groups(),
                                     eps=1e-5, tol=1e-4)
    assert all(r["status"] == "ok" for r in report.values()), report


def test_sinusoid_position_zero():
    pe = sinusoid_table(4, 8)
    np.testing.assert_allclose(pe[0, 0::2], 0.0, atol=1e-15)
    np.testing.assert_allclose(pe[0, 1::2], 1.0, atol=1e-15)


def test_attention_weights_sum_to_one():
    enc = Encoder(small_cfg(), np.random.default_rng(13))
    q = Tensor(np.random.default_rng(14).standard_normal((5, 8)))
    kv = Tensor(np.random.default_rng(15).standard_normal((7, 8)))
    sink = []
    multi_head_attention(q, kv, enc.params, "layer0.attn", 2, attn_sink=sink)
    assert len(sink) == 2
    for a in sink:
        np.testing.assert_allclose(a.data.sum(axis=1), 1.0, atol=1e-12)


def test_single_key_attention_ignores_query():
    enc = Encoder(small_cfg(), np.random.default_rng(16))
    kv = Tensor(np.random.default_rng(17).standard_normal((1, 8)))
    q = Tensor(np.random.default_rng(18).standard_normal((4, 8)))
    out = multi_head_attention(q, kv, enc.params, "layer0.attn", 2)
    for row in out.data:
        np.testing.assert_allclose(row, out.data[0], atol=1e-12)


def test_output_init_from_embeddings():
    enc = Encoder(small_cfg(), np.random.default_rng(19))
    table = np.random.default_rng(20).standard_normal((6, 8))
    assert enc.init_output_from_embeddings(table)
    w = enc.params["out.w"].value
    np.testing.assert_array_equal(w[:, 0], 0.0)
    for tok in (1, 2, 3):
        np.testing.assert_array_equal(w[:, tok], table[tok])
