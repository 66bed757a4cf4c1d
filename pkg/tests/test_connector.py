import math

import numpy as np
import pytest

from lail import tensor as T
from lail.connector import ConnectorStack, LAILConfig, build_connectors, lail_loss, total_loss
from lail.ctc import ctc_loss_batch
from lail.encoder import ConfigurationError, Encoder, EncoderConfig
from lail.gradcheck import gradcheck
from lail.lm import CausalLM, CausalLMConfig, clm_loss
from lail.nn import Linear, RngState
from lail.tensor import Tensor
from lail.train import REFERENCE_PLACEMENTS, scale_placement

D_MODEL, D_LLM = 8, 12
LM_CFG = CausalLMConfig(d_llm=D_LLM, num_layers=1, num_heads=2, context_cap=64)
ENC_CFG = EncoderConfig(d_model=D_MODEL, num_heads=2, ffn_dim=16, conv_kernel=3, d_feat=4, num_layers=4)


@pytest.fixture(scope="module")
def lm():
    m = CausalLM(LM_CFG, 12, RngState(0))
    m.freeze()
    return m


def test_length_law():
    x = np.random.default_rng(0).normal(size=(200, D_MODEL))
    for k in range(6):
        stack = ConnectorStack(D_MODEL, D_LLM, k, RngState(k))
        for T in range(1, 201):
            z, zlen = stack(Tensor(x[:T]))
            assert z.shape == (math.ceil(T / 2 ** k), D_LLM)
            assert zlen.tolist() == [math.ceil(T / 2 ** k)]


def test_k2_t7():
    z, _ = ConnectorStack(D_MODEL, D_LLM, 2, RngState(0))(Tensor(np.ones((7, D_MODEL))))
    assert z.shape == (2, D_LLM)


def test_k0_is_linear_projection():
    stack = ConnectorStack(D_MODEL, D_LLM, 0, RngState(1))
    h = np.random.default_rng(1).normal(size=(5, D_MODEL))
    z, _ = stack(Tensor(h))
    np.testing.assert_allclose(z.data, h @ stack.proj.weight.data + stack.proj.bias.data, rtol=0, atol=1e-14)


def test_depth_limit():
    with pytest.raises(ConfigurationError):
        ConnectorStack(D_MODEL, D_LLM, 6, RngState(0))


def test_gradcheck():
    stack = ConnectorStack(D_MODEL, D_LLM, 2, RngState(2))
    h = Tensor(np.random.default_rng(2).normal(size=(7, D_MODEL)), requires_grad=True)
    w = np.random.default_rng(3).normal(size=(2, D_LLM))
    assert gradcheck(lambda: (stack(h)[0] * w).sum(), [h] + stack.parameters()) < 1e-5


def test_padding_does_not_leak():
    stack = ConnectorStack(D_MODEL, D_LLM, 2, RngState(3))
    rng = np.random.default_rng(4)
    a = rng.normal(size=(1, 9, D_MODEL))
    b = a.copy()
    b[0, 5:] = 100.0
    za, la = stack(Tensor(a), [5])
    zb, _ = stack(Tensor(b), [5])
    assert la.tolist() == [2]
    np.testing.assert_array_equal(za.data[0, :2], zb.data[0, :2])


def test_independent_stacks_per_tap():
    stacks = build_connectors(D_MODEL, D_LLM, LAILConfig(tap_layers=(1, 3)), RngState(0))
    assert set(stacks) == {"1", "3"}
    assert not np.array_equal(stacks["1"].proj.weight.data, stacks["3"].proj.weight.data)
    assert stacks["3"].owner_layer == 3


@pytest.fixture(scope="module")
def setup():
    rng = np.random.default_rng(5)
    taps = {l: Tensor(rng.normal(size=(2, 9, D_MODEL))) for l in (1, 2, 3)}
    stacks = build_connectors(D_MODEL, D_LLM, LAILConfig(tap_layers=(1, 2, 3)), RngState(1))
    ys = [[1, 2, 3], [4, 5, 6, 7]]
    return taps, stacks, ys, np.array([9, 6])


def _per_layer_manual(lm, stacks, taps, ys, lengths, l):
    z, zl = stacks[str(l)](taps[l], lengths)
    return np.mean([clm_loss(lm, Tensor(z.data[b, :zl[b]]), ys[b]).item() for b in range(len(ys))])


class TestLail:
    def test_single_layer(self, lm, setup):
        taps, stacks, ys, lengths = setup
        lail, per = lail_loss(LAILConfig(tap_layers=(2,)), {2: taps[2]}, stacks, lm, ys, lengths)
        assert lail.item() == per[2].item()
        assert lail.item() == pytest.approx(_per_layer_manual(lm, stacks, taps, ys, lengths, 2), abs=1e-12)

    def test_uniform_two_layers_is_mean(self, lm, setup):
        taps, stacks, ys, lengths = setup
        cfg = LAILConfig(tap_layers=(1, 3))
        lail, per = lail_loss(cfg, {1: taps[1], 3: taps[3]}, stacks, lm, ys, lengths)
        assert lail.item() == pytest.approx((per[1].item() + per[3].item()) / 2, abs=1e-12)

    def test_linear_in_lambda(self, lm, setup):
        taps, stacks, ys, lengths = setup
        sub = {1: taps[1], 3: taps[3]}
        base, per = lail_loss(LAILConfig(tap_layers=(1, 3), lambdas={1: 1.0, 3: 0.0}), sub, stacks, lm, ys, lengths)
        assert base.item() == per[1].item()
        a, _ = lail_loss(LAILConfig(tap_layers=(1, 3), lambdas={1: 0.25, 3: 0.5}), sub, stacks, lm, ys, lengths)
        b, _ = lail_loss(LAILConfig(tap_layers=(1, 3), lambdas={1: 0.5, 3: 1.0}), sub, stacks, lm, ys, lengths)
        assert b.item() == pytest.approx(2 * a.item(), abs=1e-12)

    def test_missing_stack(self, lm, setup):
        taps, _, ys, lengths = setup
        with pytest.raises(ConfigurationError):
            lail_loss(LAILConfig(tap_layers=(1,)), {1: taps[1]}, {}, lm, ys, lengths)

    def test_lambda_keys_checked(self):
        with pytest.raises(ConfigurationError):
            LAILConfig(tap_layers=(1, 2), lambdas={1: 1.0}).weights()


class TestTotal:
    def test_examples(self):
        assert total_loss(Tensor(3.0), Tensor(2.0), 1.0).item() == 5.0
        ctc = Tensor(1.25)
        assert total_loss(ctc, None, 0.0) is ctc

    def test_affine_in_alpha(self):
        ctc, lail = Tensor(1.7), Tensor(2.3)
        t1 = total_loss(ctc, lail, 0.3).item() - 1.7
        t2 = total_loss(ctc, lail, 0.6).item() - 1.7
        assert t2 == pytest.approx(2 * t1, abs=1e-15)
        assert total_loss(ctc, lail, 0.3).item() == 1.7 + 0.3 * 2.3


def test_gradient_flow_partition(lm):
    enc = Encoder(ENC_CFG, RngState(7))
    head = Linear(D_MODEL, 6, RngState(8))
    cfg = LAILConfig(tap_layers=(2, 4))
    stacks = build_connectors(D_MODEL, D_LLM, cfg, RngState(9))
    feats = Tensor(np.random.default_rng(10).normal(size=(1, 16, 4)))
    ys = [[1, 2, 3]]

    def run(alpha):
        for p in enc.parameters() + head.parameters() + [q for s in stacks.values() for q in s.parameters()]:
            p.grad = None
        out = enc(feats, None, cfg.tap_layers)
        ctc, _ = ctc_loss_batch(T.log_softmax(head(out.final)), out.lengths, ys)
        if alpha == 0:
            return total_loss(ctc.mean(), None, 0.0)
        lail, _ = lail_loss(cfg, out.hidden, stacks, lm, ys, out.lengths)
        return total_loss(ctc.mean(), lail, alpha)

    run(0.0).backward()
    g_ctc = {p.name: p.grad.copy() for p in enc.parameters()}
    assert all(s.proj.weight.grad is None for s in stacks.values())
    run(0.3).backward()
    low = [p for p in enc.parameters() if p.name.startswith("encoder.layers.0.")]
    assert any(not np.allclose(p.grad, g_ctc[p.name]) for p in low)
    assert all(s.proj.weight.grad is not None and np.abs(s.proj.weight.grad).max() > 0 for s in stacks.values())
    assert all(p.grad is None or not p.grad.any() for p in lm.parameters())


@pytest.mark.parametrize("name", list(REFERENCE_PLACEMENTS))
def test_every_placement_constructible(lm, name):
    taps = scale_placement(REFERENCE_PLACEMENTS[name], desk_depth=ENC_CFG.num_layers)
    cfg = LAILConfig(tap_layers=taps)
    enc = Encoder(ENC_CFG, RngState(0))
    stacks = build_connectors(D_MODEL, D_LLM, cfg, RngState(1))
    out = enc(Tensor(np.ones((1, 12, 4))), None, taps)
    lail, per = lail_loss(cfg, out.hidden, stacks, lm, [[1, 2]], out.lengths)
    assert sorted(per) == list(taps) and np.isfinite(lail.item())


def test_scale_placement():
    assert scale_placement((6, 12, 18, 24)) == (2, 4, 6, 8)
    assert scale_placement((24,)) == (8,)
    assert scale_placement((4, 8, 16, 20, 24)) == (1, 3, 5, 7, 8)
