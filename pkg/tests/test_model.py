import numpy as np
import pytest

from lvc import tensor as T
from lvc.coding import bitplane_decompose, ideal_codelength, quantize_ste
from lvc.flow import warp
from lvc.model import ArchConfig, ConfigError, StateToFrame, Variant, build_coder, compensate
from lvc.nn import parse_weights, save_weights
from lvc.synthetic import static_clip, translating_clip
from lvc.tensor import DimensionError, Tensor
from oracles import numerical_grad, rel_error

ALL = list(Variant)


def small(variant, **kw):
    kw.setdefault("width", 8)
    kw.setdefault("flow_width", 4)
    kw.setdefault("state_channels", 4)
    kw.setdefault("code_channels", (4,))
    return ArchConfig(variant, **kw)


def clip(seed=0, frames=3, size=16):
    return translating_clip(np.random.default_rng(seed), frames, size, size, velocity=(0.5, 1.0))


class TestConfig:
    def test_flow_count_rules(self):
        assert ArchConfig(Variant.NAIVE).num_flows == 0
        assert ArchConfig(Variant.JOINT, num_flows=5).num_flows == 1
        assert ArchConfig(Variant.MULTI_FLOW, num_flows=3).num_flows == 3
        with pytest.raises(ConfigError):
            ArchConfig(Variant.MULTI_FLOW, num_flows=1)
        with pytest.raises(ConfigError):
            ArchConfig(Variant.FLOW_RESIDUAL, code_channels=(1,))
        with pytest.raises(ConfigError):
            ArchConfig(Variant.NAIVE, code_channels=())

    def test_json_roundtrip(self):
        cfg = ArchConfig(Variant.MULTI_FLOW, num_flows=3, code_channels=(2, 4, 6), stages=2, context_neighbors=1)
        d = cfg.to_json()
        assert d["K"] == 3 and d["R"] == 3 and d["Y_divisor"] == 4 and d["C"] == [2, 4, 6]
        assert ArchConfig.from_json(d) == cfg

    def test_code_shape(self):
        cfg = ArchConfig(Variant.NAIVE, code_channels=(3, 5))
        assert cfg.code_shape(32, 48, 2) == (5, 4, 6)
        with pytest.raises(DimensionError):
            cfg.code_shape(30, 32)


@pytest.mark.parametrize("variant", ALL)
class TestEveryVariant:
    def test_shapes_and_range(self, variant):
        coder = build_coder(small(variant))
        frames = clip()
        state = coder.initial_state(16, 16)
        for x in frames:
            codes = coder.encode_frame(x, state)
            assert codes[0].shape == (4, 2, 2)
            assert np.all(np.abs(codes[0].data) <= 1)
            recon, state, diag = coder.decode_frame([quantize_ste(c) for c in codes], state)
            assert recon.shape == (3, 16, 16) and np.isfinite(recon.data).all()

    def test_batched_matches_single(self, variant):
        coder = build_coder(small(variant))
        frames = np.stack([clip(0), clip(1)])
        st_b = coder.initial_state(16, 16, batch=2)
        st_1 = [coder.initial_state(16, 16) for _ in range(2)]
        for t in range(3):
            rec_b, st_b, _, _ = coder.step(frames[:, t], st_b)
            for i in range(2):
                rec, st_1[i], _, _ = coder.step(frames[i, t], st_1[i])
                np.testing.assert_allclose(rec.data, rec_b.data[i], rtol=0, atol=1e-12)

    def test_encode_is_pure(self, variant):
        coder = build_coder(small(variant))
        state = coder.initial_state(16, 16)
        zero = np.zeros((3, 16, 16))
        a = coder.encode_frame(zero, state)[0].data
        b = coder.encode_frame(zero, state)[0].data
        assert np.isfinite(a).all()
        np.testing.assert_array_equal(a, b)

    def test_decoder_trajectory_from_codes_alone(self, variant):
        # run the encoder side, keep only the dequantized codes, then replay
        # the decoder from a fresh coder built from serialized weights
        cfg = small(variant)
        coder = build_coder(cfg)
        state = coder.initial_state(16, 16)
        sent, recons, states = [], [], []
        for x in clip(2, frames=4):
            recon, state, _, codes_hat = coder.step(x, state)
            sent.append([c.data.copy() for c in codes_hat])
            recons.append(recon.data)
            states.append(state.arrays())
        arch, weights = parse_weights(save_weights(None, cfg.to_json(), coder.state_dict()))
        receiver = build_coder(ArchConfig.from_json(arch), weights)
        state = receiver.initial_state(16, 16)
        for codes, expected, expected_state in zip(sent, recons, states):
            recon, state, _ = receiver.decode_frame([Tensor(c) for c in codes], state)
            np.testing.assert_array_equal(recon.data, expected)
            for a, b in zip(state.arrays(), expected_state):
                np.testing.assert_array_equal(a, b)

    def test_state_changes_after_iframe(self, variant):
        coder = build_coder(small(variant))
        _, _, state = coder.code_iframe(clip()[0])
        if variant is Variant.NAIVE:
            assert state.tensors == []
        else:
            assert any(np.any(a != 0) for a in state.arrays())

    def test_shape_errors(self, variant):
        coder = build_coder(small(variant))
        state = coder.initial_state(16, 16)
        with pytest.raises(DimensionError):
            coder.encode_frame(np.zeros((3, 12, 16)), state)
        with pytest.raises(DimensionError):
            coder.decode_frame([Tensor(np.zeros((3, 2, 2)))], state)


def test_state_mismatch_is_config_error():
    naive = build_coder(small(Variant.NAIVE))
    joint = build_coder(small(Variant.JOINT))
    with pytest.raises(ConfigError):
        joint.encode_frame(np.zeros((3, 16, 16)), naive.initial_state(16, 16))
    with pytest.raises(ConfigError):
        build_coder(small(Variant.NAIVE, code_channels=(2, 3))).encode_frame(
            np.zeros((3, 16, 16)), naive.initial_state(16, 16))


def test_masks_gate_codelayers():
    coder = build_coder(small(Variant.LEARNED_STATE, code_channels=(2, 4)))
    state = coder.initial_state(16, 16)
    codes = coder.encode_frame(clip()[0], state, np.ones((2, 2, 2)))
    masks = np.zeros((2, 2, 2))
    masks[0] = 1
    rng = np.random.default_rng(0)
    a, _, _ = coder.decode_frame([Tensor(c.data) for c in codes], state, masks)
    noisy = [Tensor(codes[0].data), Tensor(rng.uniform(-1, 1, size=codes[1].shape))]
    b, _, _ = coder.decode_frame(noisy, state, masks)
    np.testing.assert_array_equal(a.data, b.data)


class TestCompensation:
    def test_degenerate_mixture_is_single_flow(self):
        coder = build_coder(small(Variant.MULTI_FLOW))
        head = coder.state_to_frame.net.head
        k = 2
        # saturate the mixture logits: weight 1 on flow 0, exactly 0 on flow 1
        head.weight.data[5 * k : 6 * k] = 0
        head.bias.data[5 * k] = 1000.0
        head.bias.data[5 * k + 1] = -1000.0
        state = coder.initial_state(16, 16)
        frames = clip()
        for x in frames:
            recon, new_state, diag, _ = coder.step(x, state)
            w = diag["weights"].data
            assert np.all(w[0] == 1.0) and np.all(w[1] == 0.0)
            single = warp(diag["references"][0], diag["flows"][0]).data + diag["residual"].data
            np.testing.assert_array_equal(recon.data, single)
            state = new_state

    def test_mixture_weights_are_a_partition(self):
        coder = build_coder(small(Variant.MULTI_FLOW, num_flows=3))
        state = coder.initial_state(16, 16)
        for x in clip():
            _, state, diag, _ = coder.step(x, state)
            w = diag["weights"].data
            assert w.shape == (3, 16, 16) and w.min() >= 0
            np.testing.assert_allclose(w.sum(axis=0), 1.0, rtol=0, atol=1e-14)

    def test_zero_flow_and_residual_copies_previous(self):
        coder = build_coder(small(Variant.FLOW_RESIDUAL))
        for head in (coder.flow_decoder.head, coder.residual_decoder.head):
            head.weight.data[:] = 0
            head.bias.data[:] = 0
        rng = np.random.default_rng(4)
        prev = rng.random((3, 16, 16))
        state = coder.initial_state(16, 16)
        state.tensors[0] = Tensor(prev)
        codes = coder.encode_frame(rng.random((3, 16, 16)), state)
        recon, _, diag = coder.decode_frame([quantize_ste(c) for c in codes], state)
        assert np.all(diag["flow"].data == 0)
        np.testing.assert_array_equal(recon.data, prev)

    def test_compensate_single_reference(self, rng):
        ref = rng.random((1, 3, 8, 8))
        flow = rng.uniform(-1, 1, size=(1, 2, 8, 8))
        np.testing.assert_array_equal(compensate([Tensor(ref)], [Tensor(flow)], None).data,
                                      warp(ref, flow).data)


def test_one_flow_mixture_reduces_to_learned_state():
    learned = build_coder(small(Variant.LEARNED_STATE))
    multi = build_coder(small(Variant.MULTI_FLOW))
    # matched weights everywhere, with a one-flow state-to-frame module
    multi.state_to_frame = StateToFrame(4, 8, 1, np.random.default_rng(9), 3)
    multi.load_state_dict(learned.state_dict())
    sl, sm = learned.initial_state(16, 16), multi.initial_state(16, 16)
    for x in clip(3):
        rl, sl, _, _ = learned.step(x, sl)
        rm, sm, diag, _ = multi.step(x, sm)
        assert "weights" not in diag
        np.testing.assert_array_equal(rl.data, rm.data)


def test_encoder_weight_gradient():
    coder = build_coder(small(Variant.JOINT))
    frames = clip(5)
    w = coder.encoder.bottom.weight
    # scalar loss downstream of the encoder, before quantization
    probe = np.random.default_rng(0).normal(size=(4, 2, 2))

    def loss():
        state = coder.initial_state(16, 16)
        _, state, _, _ = coder.step(frames[0], state)
        codes = coder.encode_frame(frames[1], state.detach())
        return T.sum_(codes[0] * probe)

    coder.zero_grad()
    T.backward(loss())
    analytic = w.grad.copy()
    num = numerical_grad(lambda: loss().item(), w.data)
    assert rel_error(analytic, num) < 1e-3


@pytest.mark.slow
def test_pframe_cheaper_than_iframe_after_training():
    from lvc.training import TrainConfig, Trainer

    cfg = ArchConfig(Variant.LEARNED_STATE, code_channels=(4,))
    coder = build_coder(cfg)

    def sampler(rng, n):
        return np.stack([static_clip(rng, 2, 32, 32) for _ in range(n)])

    Trainer(coder, None, TrainConfig(iterations=300, batch=4, unroll=2, lr=1e-3, targets=(0.3,)), sampler).run()
    rng = np.random.default_rng(77)
    lengths = np.zeros(2)
    for _ in range(6):
        frames = static_clip(rng, 2, 32, 32)
        state = coder.initial_state(32, 32)
        for t in range(2):
            _, state, _, codes_hat = coder.step(frames[t], state)
            bits, _ = bitplane_decompose(codes_hat[0].data)
            lengths[t] += ideal_codelength(bits, cfg.context)
    assert lengths[1] <= lengths[0]
