import math

import numpy as np
import pytest

from tandens import diffcore as dc
from tandens.errors import CheckpointError, ContractError
from tandens.model import ModelSpec, TanModel, build_model, load_checkpoint, save_checkpoint
from tandens.rng import RandomStream
from tandens.transforms import Chain, Rescale
from tandens.conditionals import SingleInd

from helpers import numeric_gradient, quadrature_mass_2d, rel_err, shake_params

STD_NORMAL_AT_MODE = -0.5 * math.log(2.0 * math.pi)

TINY = dict(mixture_components=2, hidden_width=4, gru_units=4, rnn_hidden=3,
            shift_state=3, shift_hidden=4, coupling_hidden=4)


def tiny_spec(preset, conditional, d, seed=0):
    return ModelSpec(preset=preset, conditional=conditional, d=d, seed=seed, **TINY)


class TestLogProb:
    def test_empty_chain_single_ind_at_zero(self):
        model = TanModel(ModelSpec("None", "SingleInd", 4), Chain([], 4), SingleInd(4))
        ll = model.log_prob_values(np.zeros((1, 4)))
        assert ll[0] == pytest.approx(-3.675754, abs=1e-6)

    def test_rescale_single_ind_closed_form(self):
        d = 3
        rescale = Rescale("re", d)
        s = np.array([0.3, -0.7, 1.1])
        rescale.s.value = s
        model = TanModel(ModelSpec("None", "SingleInd", d), Chain([rescale], d), SingleInd(d))
        ll = model.log_prob_values(np.zeros((1, d)))
        expected = s.sum() - 0.5 * d * math.log(2 * math.pi)
        assert ll[0] == pytest.approx(expected, rel=1e-12)

    def test_d2_model_density_integrates_to_one(self):
        model = build_model(tiny_spec("L 4xAdd+Re", "LAM", 2, seed=3))
        shake_params(model.params, seed=4, scale=0.3, overrides={"head.out": 0.05})
        mass = quadrature_mass_2d(model.log_prob_values,
                                  lambda n: model.sample(n, RandomStream(99)))
        assert mass == pytest.approx(1.0, abs=1e-2)

    def test_zero_rescale_matches_chain_free_model(self):
        d = 3
        rescale = Rescale("re", d)
        with_chain = TanModel(ModelSpec("None", "SingleInd", d), Chain([rescale], d), SingleInd(d))
        without = TanModel(ModelSpec("None", "SingleInd", d), Chain([], d), SingleInd(d))
        x = RandomStream(5).normal((10, d))
        assert np.array_equal(with_chain.log_prob_values(x), without.log_prob_values(x))

    def test_dimension_mismatch_rejected(self):
        model = build_model(tiny_spec("None", "SingleInd", 3))
        with pytest.raises(ContractError):
            model.log_prob_values(np.zeros((2, 4)))


class TestNll:
    def test_single_instance(self):
        model = build_model(tiny_spec("None", "MultiInd", 3, seed=6))
        x = RandomStream(7).normal((1, 3))
        nll = float(model.nll(x).data)
        assert nll == pytest.approx(-float(model.log_prob_values(x)[0]), rel=1e-12)

    def test_duplicated_batch_has_same_loss(self):
        model = build_model(tiny_spec("None", "MultiInd", 3, seed=8))
        x = RandomStream(9).normal((1, 3))
        batch = np.repeat(x, 5, axis=0)
        assert float(model.nll(batch).data) == pytest.approx(float(model.nll(x).data), rel=1e-12)

    def test_empty_batch_rejected(self):
        model = build_model(tiny_spec("None", "SingleInd", 3))
        with pytest.raises(ContractError):
            model.nll(np.zeros((0, 3)))

    @pytest.mark.parametrize("conditional", ["LAM", "RAM", "TIED", "MultiInd"])
    def test_gradients_match_finite_differences(self, conditional):
        model = build_model(tiny_spec("L RNN", conditional, 3, seed=10))
        shake_params(model.params, seed=11, scale=0.2, overrides={"head.out": 0.05})
        x = RandomStream(12).normal((4, 3))

        with dc.Tape() as tape:
            loss = model.nll(x)
        grads = dc.backward(tape, loss, model.params)
        numeric = numeric_gradient(lambda: float(model.nll(x).data), model.params)
        for p, g, ng in zip(model.params, grads, numeric):
            assert rel_err(g, ng) < 1e-4, p.name


class TestSample:
    def test_empty_chain_single_ind_moments(self):
        model = build_model(tiny_spec("None", "SingleInd", 2, seed=13))
        x = model.sample(100000, RandomStream(14))
        assert abs(x.mean()) < 4.0 / math.sqrt(x.size)
        assert abs(x.var() - 1.0) < 0.1

    def test_rescale_inverse_divides(self):
        d = 2
        rescale = Rescale("re", d)
        s = np.array([0.5, -0.25])
        rescale.s.value = s
        model = TanModel(ModelSpec("None", "SingleInd", d), Chain([rescale], d), SingleInd(d))
        x = model.sample(100000, RandomStream(15))
        np.testing.assert_allclose(x.std(axis=0), np.exp(-s), rtol=0.05)

    def test_sample_log_prob_is_finite(self):
        model = build_model(tiny_spec("L 4xAdd+Re", "LAM", 4, seed=16))
        shake_params(model.params, seed=17, scale=0.2, overrides={"head.out": 0.05})
        x = model.sample(512, RandomStream(18))
        assert np.all(np.isfinite(model.log_prob_values(x)))

    def test_sample_zero_instances(self):
        model = build_model(tiny_spec("None", "SingleInd", 3))
        x = model.sample(0, RandomStream(19))
        assert x.shape == (0, 3)


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        model = build_model(tiny_spec("L RNN+4xAdd+Re", "RAM", 5, seed=20))
        shake_params(model.params, seed=21, scale=0.2)
        path = save_checkpoint(model, tmp_path / "m.ckpt", meta={"iteration": 7, "val_nll": 1.25})
        loaded, meta = load_checkpoint(path)
        assert meta == {"iteration": 7, "val_nll": 1.25}
        x = RandomStream(22).normal((100, 5))
        assert np.array_equal(model.log_prob_values(x), loaded.log_prob_values(x))

    def test_truncated_payload_is_rejected(self, tmp_path):
        model = build_model(tiny_spec("None", "MultiInd", 3, seed=23))
        path = save_checkpoint(model, tmp_path / "m.ckpt")
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_not_a_checkpoint_is_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"hello world\n")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_version_mismatch_is_rejected(self, tmp_path):
        model = build_model(tiny_spec("None", "SingleInd", 3))
        path = save_checkpoint(model, tmp_path / "m.ckpt")
        blob = path.read_bytes()
        path.write_bytes(blob.replace(b"TANDENS-CKPT 1\n", b"TANDENS-CKPT 9\n", 1))
        with pytest.raises(CheckpointError) as err:
            load_checkpoint(path)
        assert "version" in str(err.value)

    def test_config_only_rebuild_matches_shapes(self, tmp_path):
        model = build_model(tiny_spec("RNN+4xSRNN+Re", "TIED", 4, seed=24))
        path = save_checkpoint(model, tmp_path / "m.ckpt")
        loaded, _ = load_checkpoint(path)
        rebuilt = build_model(loaded.spec)
        assert [p.name for p in rebuilt.params] == [p.name for p in model.params]
        for a, b in zip(rebuilt.params, model.params):
            assert a.value.shape == b.value.shape
