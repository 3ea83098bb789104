import numpy as np
import pytest

from dida import tensor as T
from dida.encoder import (Encoder, EncoderConfig, init_encoder, load_checkpoint,
                          save_checkpoint)
from dida.gradcheck import run_encoder_suite


@pytest.fixture(scope="module")
def encoder():
    return init_encoder(EncoderConfig())


@pytest.fixture
def image():
    return np.random.default_rng(7).uniform(0, 1, (3, 32, 32))


def test_same_seed_gives_identical_parameters():
    a, b = init_encoder(EncoderConfig(seed=3)), init_encoder(EncoderConfig(seed=3))
    for p, q in zip(a.params, b.params):
        assert p.data.tobytes() == q.data.tobytes()


def test_different_seed_differs():
    a, b = init_encoder(EncoderConfig(seed=3)), init_encoder(EncoderConfig(seed=4))
    assert not np.array_equal(a.params[0].data, b.params[0].data)


def test_small_feature_dim_rejected():
    with pytest.raises(ValueError):
        EncoderConfig(feature_dim=4)


def test_activation_must_stay_at_least_two_wide():
    with pytest.raises(ValueError):
        EncoderConfig(input_size=8, widths=(4, 4, 4))


def test_default_geometry():
    cfg = EncoderConfig()
    assert cfg.activation_size == 4 and cfg.num_maps == 32


def test_four_layer_geometry():
    cfg = EncoderConfig(widths=(8, 16, 32, 32))
    assert cfg.activation_size == 2 and cfg.num_maps == 32


def test_output_shapes(encoder, image):
    out = encoder(image)
    assert out.features.shape == (32,)
    assert out.activations.shape == (32, 4, 4)


def test_features_strictly_inside_unit_interval(encoder, image):
    f = encoder(image).features.data
    assert np.all(f > 0) and np.all(f < 1)


def test_activations_nonnegative(encoder, image):
    assert np.all(encoder(image).activations.data >= 0)


def test_all_zero_image_is_finite(encoder):
    out = encoder(np.zeros((3, 32, 32)))
    assert np.all(np.isfinite(out.features.data))


def test_shape_mismatch_rejected(encoder):
    with pytest.raises(ValueError):
        encoder(np.zeros((3, 16, 16)))


def test_forward_is_pure(encoder, image):
    before = encoder.state()
    a = encoder(image).features.data
    b = encoder(image).features.data
    assert a.tobytes() == b.tobytes()
    for p, q in zip(before, encoder.state()):
        assert p.tobytes() == q.tobytes()


def test_activations_carry_graph(encoder, image):
    out = encoder(image)
    (g,) = T.backward(T.sum(out.features), [out.activations])
    assert g.shape == out.activations.shape and np.any(g.data != 0)


def test_parameter_gradients_match_finite_differences():
    result = run_encoder_suite(EncoderConfig(3, 8, (4, 8), 8, 0), trials=2, seed=0)
    assert result.worst <= 1e-6


def test_num_parameters():
    enc = init_encoder(EncoderConfig(3, 8, (4,), 8, 0))
    assert enc.num_parameters() == 4 * 3 * 9 + 4 + 8 * 4 + 8


class TestCheckpoint:
    def test_round_trip(self, tmp_path, image):
        enc = init_encoder(EncoderConfig(seed=11))
        save_checkpoint(enc, tmp_path / "a.dida")
        back = load_checkpoint(tmp_path / "a.dida")
        assert back.config == enc.config
        for p, q in zip(enc.params, back.params):
            assert p.data.tobytes() == q.data.tobytes()
        assert enc(image).features.data.tobytes() == back(image).features.data.tobytes()

    def test_layout(self, tmp_path):
        enc = init_encoder(EncoderConfig(3, 8, (4,), 8, 2))
        save_checkpoint(enc, tmp_path / "a.dida")
        raw = (tmp_path / "a.dida").read_bytes()
        assert raw[:5] == b"DIDA1"
        header = np.frombuffer(raw, dtype="<i4", count=6, offset=5)
        np.testing.assert_array_equal(header, [3, 8, 1, 4, 8, 2])
        assert len(raw) == 5 + 6 * 4 + 8 * enc.num_parameters()
        first = np.frombuffer(raw, dtype="<f8", count=1, offset=5 + 24)[0]
        assert first == enc.params[0].data.flat[0]

    def test_identical_seeds_give_identical_bytes(self, tmp_path):
        save_checkpoint(init_encoder(EncoderConfig(seed=5)), tmp_path / "a")
        save_checkpoint(init_encoder(EncoderConfig(seed=5)), tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    @pytest.mark.parametrize("mutate", [
        lambda raw: b"NOPE1" + raw[5:],
        lambda raw: raw[:-8],
        lambda raw: raw + b"\0",
        lambda raw: raw[:12],
    ], ids=["magic", "truncated", "trailing", "short-header"])
    def test_corrupt_files_rejected(self, tmp_path, mutate):
        save_checkpoint(init_encoder(EncoderConfig(3, 8, (4,), 8, 0)), tmp_path / "a")
        (tmp_path / "b").write_bytes(mutate((tmp_path / "a").read_bytes()))
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "b")


def test_parameter_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        Encoder(EncoderConfig(3, 8, (4,), 8, 0), params=[np.zeros(3)])
