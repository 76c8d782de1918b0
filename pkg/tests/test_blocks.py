import math

import numpy as np
import pytest

from convluna import tensor as T
from convluna.attention import FilterSpec, score_probe
from convluna.blocks import LunaBlock, LunaState, Model, VanillaBlock, convluna_block, luna_block
from convluna.config import ModelConfig
from convluna.errors import ConfigError, InputError
from convluna.tensor import Tensor

from conftest import naive_mha, proj_arrays, randomize


def ln(x, gamma, beta, eps=1e-5):
    out = np.empty_like(x)
    for i, row in enumerate(x):
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        out[i] = [(v - mu) / math.sqrt(var + eps) for v in row]
    return out * gamma + beta


def ffn(x, block):
    f = block.ffn
    hidden = x @ f.fc1.weight.data + f.fc1.bias.data
    hidden = np.vectorize(lambda v: 0.5 * v * (1 + math.erf(v / math.sqrt(2))))(hidden)
    return hidden @ f.fc2.weight.data + f.fc2.bias.data


def norm(x, layer):
    return ln(x, layer.gamma.data, layer.beta.data)


def conv_ref(x, weight, bias):
    """Stride-1 same-coverage depthwise convolution."""
    k = weight.shape[0]
    left = (k - 1) // 2
    padded = np.vstack([np.zeros((left, x.shape[1])), x, np.zeros((k - 1 - left, x.shape[1]))])
    return np.stack([(padded[i : i + k] * weight).sum(axis=0) + bias for i in range(x.shape[0])])


def luna_oracle(block, x, p, h, packing):
    packed = packing(p, x)
    a = proj_arrays(block.unpack.proj)
    unpacked = naive_mha(x, packed, packed, **a, h=h)
    i = norm(x + unpacked, block.norm_x)
    p_next = norm(p + packed, block.norm_p)
    x_next = norm(ffn(i, block) + i, block.norm_out)
    return x_next, p_next


class TestVanillaBlock:
    def test_straight_line_oracle(self, high, rng):
        block = VanillaBlock(8, 2, 16)
        randomize(block, rng)
        x = rng.normal(size=(5, 8))
        got = block(Tensor(x)).data
        xn = norm(x, block.norm_attn)
        i = x + naive_mha(xn, xn, xn, **proj_arrays(block.attn.proj), h=2)
        expected = i + ffn(norm(i, block.norm_ffn), block)
        assert np.abs(got - expected).max() <= 1e-10

    def test_zero_output_projections_are_identity(self, high, rng):
        block = VanillaBlock(8, 2, 16)
        randomize(block, rng)
        for lin in (block.attn.proj.output, block.ffn.fc2):
            lin.weight.data[:] = 0
            lin.bias.data[:] = 0
        x = rng.normal(size=(4, 8))
        np.testing.assert_array_equal(block(Tensor(x)).data, x)


class TestLunaBlock:
    def test_straight_line_oracle(self, high, rng):
        block = luna_block(8, 2, 16)
        randomize(block, rng)
        x, p = rng.normal(size=(6, 8)), rng.normal(size=(3, 8))
        out = block(LunaState(Tensor(x), Tensor(p)))
        pack = proj_arrays(block.pack.proj)
        ex, ep = luna_oracle(block, x, p, 2, lambda p, x: naive_mha(p, x, x, **pack, h=2))
        assert np.abs(out.x.data - ex).max() <= 1e-10
        assert np.abs(out.p.data - ep).max() <= 1e-10

    def test_separate_weights(self):
        block = luna_block(8, 2, 16)
        assert block.pack.proj is not block.unpack.proj

    def test_zero_output_projections_reduce_to_norms(self, high, rng):
        block = luna_block(4, 2, 8)
        randomize(block, rng)
        for lin in (block.pack.proj.output, block.unpack.proj.output, block.ffn.fc2):
            lin.weight.data[:] = 0
            lin.bias.data[:] = 0
        x, p = rng.normal(size=(5, 4)), rng.normal(size=(2, 4))
        out = block(LunaState(Tensor(x), Tensor(p)))
        np.testing.assert_allclose(out.x.data, norm(norm(x, block.norm_x), block.norm_out), atol=1e-12)
        np.testing.assert_allclose(out.p.data, norm(p, block.norm_p), atol=1e-12)

    def test_single_memory_row_broadcasts_to_tokens(self, high, rng):
        block = luna_block(4, 2, 8)
        randomize(block, rng)
        x = rng.normal(size=(5, 4))
        with score_probe(keep_scores=True) as probe:
            block(LunaState(Tensor(x), Tensor(rng.normal(size=(1, 4)))))
        unpack_probs = probe.scores("unpack")[0]
        assert unpack_probs.shape == (2, 5, 1)
        np.testing.assert_array_equal(unpack_probs, 1.0)


class TestConvLunaBlock:
    def test_straight_line_oracle(self, high, rng):
        block = convluna_block(8, 2, 16, FilterSpec("conv", 3, 1))
        randomize(block, rng)
        block.pack.tau.data = np.array(0.4)
        x, p = rng.normal(size=(7, 8)), rng.normal(size=(3, 8))
        out = block(LunaState(Tensor(x), Tensor(p)))
        a = proj_arrays(block.pack.proj)
        kf, vf = block.pack.key_filter, block.pack.value_filter

        def packing(p, x):
            k = conv_ref(x @ a["wk"] + a["bk"], kf.kernel.data, kf.bias.data)
            v = conv_ref(x, vf.kernel.data, vf.bias.data)
            eye = np.eye(8)
            return naive_mha(p, k, v, a["wq"], a["bq"], eye, np.zeros(8), None, None, a["wo"], a["bo"], h=2, divisor=math.exp(0.4))

        ex, ep = luna_oracle(block, x, p, 2, packing)
        assert np.abs(out.x.data - ex).max() <= 1e-10
        assert np.abs(out.p.data - ep).max() <= 1e-10

    def test_shares_projections_and_has_no_value_projection(self):
        block = convluna_block(8, 2, 16, FilterSpec("maxpool", 4, 1))
        assert block.pack.proj is block.unpack.proj
        assert block.pack.proj.value is None
        assert block.pack.tau is not None
        names = [n for n, _ in block.named_parameters()]
        assert len(names) == len(set(names))
        assert sum(n.endswith("tau") for n in names) == 1

    @pytest.mark.parametrize("d,h", [(2, 1), (4, 2), (8, 2), (8, 4), (4, 1)])
    def test_neutral_settings_reduce_to_luna(self, high, rng, d, h):
        neutral = LunaBlock(d, h, 2 * d, rescaled=True, filt=FilterSpec(), temperature_mode="learnable-exp-tau")
        luna = luna_block(d, h, 2 * d)
        randomize(luna, rng)
        neutral.load_state_dict({**luna.state_dict(), "pack.tau": np.array(math.log(math.sqrt(d // h)))})
        x, p = rng.normal(size=(5, d)), rng.normal(size=(3, d))
        a = neutral(LunaState(Tensor(x), Tensor(p)))
        b = luna(LunaState(Tensor(x), Tensor(p)))
        assert a.x.data.tobytes() == b.x.data.tobytes()
        assert a.p.data.tobytes() == b.p.data.tobytes()


def tiny_cfg(**kw):
    base = dict(arch="convluna", blocks=2, d=8, h=2, mlp_dim=16, memory_size=3, vocab_size=10, max_len=12, num_classes=4, filter=FilterSpec("conv", 3, 1))
    base.update(kw)
    return ModelConfig(**base)


class TestModel:
    def test_parameter_count_closed_form(self):
        d, mlp, M, V, Lmax, C, K, nb = 8, 16, 3, 10, 12, 4, 3, 2
        embed = V * d + Lmax * d
        linear = d * d + d
        layer_norms = 3 * 2 * d
        feedforward = d * mlp + mlp + mlp * d + d
        head = d * C + C
        convluna = 3 * linear + 2 * (K * d + d) + 1 + layer_norms + feedforward
        luna = 2 * 4 * linear + layer_norms + feedforward
        vanilla = 4 * linear + 2 * 2 * d + feedforward
        assert Model(tiny_cfg()).num_parameters() == embed + M * d + nb * convluna + head == 1454
        assert Model(tiny_cfg(arch="luna")).num_parameters() == embed + M * d + nb * luna + head
        assert Model(tiny_cfg(arch="vanilla", memory_size=None)).num_parameters() == embed + nb * vanilla + head
        assert Model(tiny_cfg(dual_input=True)).num_parameters() == 1454 + d * C

    def test_ablation_mapping(self):
        scaling = Model(tiny_cfg(arch="luna-only-scaling", filter=FilterSpec()))
        filtering = Model(tiny_cfg(arch="luna-only-filtering"))
        assert scaling.blocks[0].pack.tau is not None and scaling.blocks[0].pack.filt.kind == "identity"
        assert filtering.blocks[0].pack.tau is None and filtering.blocks[0].pack.filt.kind == "conv"

    def test_vanilla_forbids_memory(self):
        with pytest.raises(ConfigError):
            tiny_cfg(arch="vanilla", memory_size=4)

    @pytest.mark.parametrize("arch", ["vanilla", "luna", "convluna", "luna-only-scaling", "luna-only-filtering"])
    @pytest.mark.parametrize("kind", ["conv", "maxpool"])
    def test_padded_ids_do_not_change_logits(self, high, rng, arch, kind):
        filt = FilterSpec() if arch == "luna-only-scaling" else FilterSpec(kind, 3, 1)
        cfg = tiny_cfg(arch=arch, memory_size=None if arch == "vanilla" else 3, filter=filt)
        model = Model(cfg, seed=1)
        ids = rng.integers(1, 10, size=(3, 12))
        mask = np.arange(12)[None, :] < np.array([[12], [7], [3]])
        ids = np.where(mask, ids, 0)
        noisy = np.where(mask, ids, rng.integers(0, 10, size=ids.shape))
        a = model(ids, mask).data
        b = model(noisy, mask).data
        assert np.abs(a - b).max() < 1e-10

    @pytest.mark.parametrize("kind", ["conv", "maxpool"])
    def test_trailing_pad_width_does_not_matter(self, high, rng, kind):
        model = Model(tiny_cfg(filter=FilterSpec(kind, 4, 1)), seed=2)
        ids = rng.integers(1, 10, size=(1, 5))
        wide = np.zeros((1, 12), dtype=int)
        wide[:, :5] = ids
        mask = np.arange(12)[None, :] < 5
        np.testing.assert_allclose(model(wide, mask).data, model(ids, np.ones((1, 5), bool)).data, atol=1e-12)

    def test_memory_average_pooling_with_single_row(self, high):
        model = Model(tiny_cfg(memory_size=1))
        state = model.encode(np.ones((2, 5), dtype=int))
        assert state.shape == (2, 8)

    def test_dual_input_identical_halves(self, high, rng):
        model = Model(tiny_cfg(dual_input=True))
        ids = rng.integers(1, 10, size=(2, 6))
        rep_a = model.encode(ids).data
        logits = model(ids, None, ids, None).data
        w, b = model.classifier.weight.data, model.classifier.bias.data
        np.testing.assert_allclose(logits, np.concatenate([rep_a, rep_a], axis=-1) @ w + b, atol=1e-12)

    def test_positions_not_added_to_memory(self, high):
        model = Model(tiny_cfg())
        before = model.memory.data.copy()
        model.position_embedding.data[:] = 100.0
        model(np.ones((1, 4), dtype=int))
        np.testing.assert_array_equal(model.memory.data, before)

    def test_too_long_is_input_error(self):
        with pytest.raises(InputError):
            Model(tiny_cfg())(np.ones((1, 13), dtype=int))

    def test_out_of_vocab_is_input_error(self):
        with pytest.raises(InputError):
            Model(tiny_cfg())(np.full((1, 4), 10))

    def test_same_seed_same_init(self):
        a, b = Model(tiny_cfg(), seed=5).state_dict(), Model(tiny_cfg(), seed=5).state_dict()
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)


class TestCost:
    LENGTHS = (128, 256, 512, 1024)

    def _flops(self, cfg, length):
        model = Model(cfg)
        with T.count_flops() as fc, T.no_grad():
            model(np.ones((1, length), dtype=int))
        return fc

    @pytest.mark.parametrize("arch", ["luna", "convluna"])
    def test_memory_archs_affine_in_length(self, arch):
        cfg = tiny_cfg(arch=arch, memory_size=16, max_len=1024, filter=FilterSpec("conv", 4, 1))
        totals = [self._flops(cfg, n).total for n in self.LENGTHS]
        assert totals[1] - totals[0] == (totals[2] - totals[1]) / 2 == (totals[3] - totals[2]) / 4

    def test_vanilla_scores_quadratic(self):
        cfg = tiny_cfg(arch="vanilla", memory_size=None, max_len=1024)
        scores = [self._flops(cfg, n).matching("attn.scores") for n in self.LENGTHS]
        assert scores[3] == 64 * scores[0]

    @pytest.mark.parametrize("arch", ["luna", "convluna"])
    def test_no_length_squared_scores(self, arch):
        model = Model(tiny_cfg(arch=arch, memory_size=3, max_len=12, filter=FilterSpec("maxpool", 2, 2)))
        with score_probe() as probe, T.no_grad():
            model(np.ones((1, 12), dtype=int))
        assert all(shape != (12, 12) for _, shape, _ in probe.records)
        packed_len = 6 if arch == "convluna" else 12
        assert {shape for _, shape, _ in probe.records} == {(3, packed_len), (12, 3)}
        assert probe.largest[0] * probe.largest[1] == max(3 * packed_len, 12 * 3)
