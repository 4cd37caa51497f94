import struct

import numpy as np
import pytest

from oracles import central_difference, rel_error
from sslband.errors import ConfigError, FormatError
from sslband.losses import CenterBank, center_loss, one_hot, softmax_ce
from sslband.model import (
    ModelConfig,
    band_groups,
    build,
    init_first_layer_by_duplication,
    load_checkpoint,
    save_checkpoint,
)
from sslband.tensor_core import BatchNorm, Conv2d, FilterBank4, MaxPool2, ReLU, conv2d


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(8, 5, (10, 10))  # two pooled blocks need multiples of 4
    with pytest.raises(ConfigError):
        ModelConfig(8, 5, (8, 8), kernel_size=2)
    with pytest.raises(ConfigError):
        ModelConfig(8, 1, (8, 8))
    with pytest.raises(ConfigError):
        ModelConfig(8, 5, (8, 8), head="mlp")


def test_config_round_trips_through_dict():
    cfg = ModelConfig(6, 4, (16, 8), conv_blocks=[(4, 1), (8, 2)], head="fc", head_dim=12)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.feature_dim == 12 and cfg.penultimate_spatial == (4, 2)


def test_duplication_rescales_and_cycles(rng):
    base = rng.standard_normal((4, 3, 3, 3))
    out = init_first_layer_by_duplication(FilterBank4(base), 9).weights
    assert out.shape == (4, 9, 3, 3)
    for c in range(9):
        np.testing.assert_allclose(out[:, c], base[:, c % 3] / 3)


def test_duplication_preserves_response_to_flat_input(rng):
    # a spectrally flat cube (every band identical) sees the same response whenever C is a multiple of 3
    base = rng.standard_normal((5, 3, 3, 3))
    plane = rng.standard_normal((1, 1, 6, 6))
    ref, _ = conv2d(np.repeat(plane, 3, axis=1), base, pad=1)
    for c in (3, 6, 33):
        w = init_first_layer_by_duplication(base, c).weights
        out, _ = conv2d(np.repeat(plane, c, axis=1), w, pad=1)
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_duplication_preserves_variance_per_pixel_monte_carlo():
    # flat white noise: each pixel i.i.d. across space but shared across bands
    r = np.random.default_rng(3)
    base = r.standard_normal((2, 3, 3, 3))
    w = init_first_layer_by_duplication(base, 6).weights
    plane = r.standard_normal((200, 1, 8, 8))
    a, _ = conv2d(np.repeat(plane, 3, axis=1), base)
    b, _ = conv2d(np.repeat(plane, 6, axis=1), w)
    assert b.var() == pytest.approx(a.var(), rel=1e-10)


def test_build_layer_order():
    net = build(ModelConfig(5, 3, (8, 8), conv_blocks=[(4, 1), (6, 1)]), seed=0)
    kinds = [type(layer) for layer in net.trunk]
    assert kinds[:4] == [Conv2d, BatchNorm, ReLU, MaxPool2]
    assert net.first_layer.params["weight"].shape == (4, 5, 3, 3)
    feats, logits = net.forward(np.zeros((2, 5, 8, 8)))
    assert feats.shape == (2, 6) and logits.shape == (2, 3)


def test_build_is_deterministic_per_seed():
    cfg = ModelConfig(4, 3, (8, 8), conv_blocks=[(4, 1)])
    a, b, c = build(cfg, seed=1), build(cfg, seed=1), build(cfg, seed=2)
    for (_, pa, _), (_, pb, _), (_, pc, _) in zip(a.parameters(), b.parameters(), c.parameters()):
        np.testing.assert_array_equal(pa, pb)
    assert not np.array_equal(a.first_layer.params["weight"], c.first_layer.params["weight"])


def test_band_groups_are_views():
    net = build(ModelConfig(4, 3, (8, 8), conv_blocks=[(4, 1)]), seed=0)
    groups = band_groups(net)
    assert len(groups) == 4 and groups[2].shape == (4, 3, 3)
    groups[2][...] = 0
    assert not net.first_layer.params["weight"][:, 2].any()


def test_forward_rejects_wrong_band_count():
    net = build(ModelConfig(4, 3, (8, 8), conv_blocks=[(4, 1)]), seed=0)
    with pytest.raises(ConfigError):
        net.forward(np.zeros((1, 3, 8, 8)))


@pytest.mark.parametrize("head", ["gap", "fc"])
def test_network_gradient_end_to_end(head):
    """Softmax + center loss through the whole network, 64-bit, random points."""
    r = np.random.default_rng(11)
    cfg = ModelConfig(3, 3, (4, 4), conv_blocks=[(2, 1), (3, 1)], head=head, head_dim=4)
    for trial in range(10):
        net = build(cfg, seed=trial, dtype=np.float64)
        # perturb BN affine params so they are not at their trivial init
        for _, p, _ in net.parameters():
            p += 0.1 * r.standard_normal(p.shape)
        x = r.standard_normal((4, 3, 4, 4))
        labels = np.array([0, 1, 2, 1])
        y = one_hot(labels, 3)
        bank = CenterBank(r.standard_normal((3, cfg.feature_dim)))

        def loss_at(w1):
            saved = net.first_layer.params["weight"].copy()
            net.first_layer.params["weight"][...] = w1
            f, z = net.forward(x, train=True)
            net.first_layer.params["weight"][...] = saved
            return softmax_ce(z, y)[0] + center_loss(f, labels, bank, 0.5)[0]

        net.zero_grad()
        f, z = net.forward(x, train=True)
        _, gz = softmax_ce(z, y)
        _, gf = center_loss(f, labels, bank, 0.5)
        net.backward(gf, gz)
        analytic = net.first_layer.grads["weight"].copy()
        w1 = net.first_layer.params["weight"].copy()
        numeric = central_difference(loss_at, w1)
        assert rel_error(analytic, numeric) < 1e-5


# ---------------------------------------------------------------- checkpoints


def _trained_like_net():
    net = build(ModelConfig(5, 3, (8, 8), conv_blocks=[(4, 1)]), seed=3, dtype=np.float32)
    net.active_bands[[1, 3]] = False
    net.apply_band_mask()
    for layer in net.layers:
        for buf in layer.buffers().values():
            buf += 0.25
    return net


def test_checkpoint_round_trip(tmp_path):
    net = _trained_like_net()
    save_checkpoint(net, tmp_path / "m.bpn")
    back = load_checkpoint(tmp_path / "m.bpn")
    assert back.config == net.config
    np.testing.assert_array_equal(back.active_bands, net.active_bands)
    for (na, pa, _), (nb, pb, _) in zip(net.parameters(), back.parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa, pb)
    x = np.random.default_rng(0).standard_normal((2, 5, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(net.forward(x)[1], back.forward(x)[1])


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "m.bpn"
    save_checkpoint(_trained_like_net(), p)
    raw = bytearray(p.read_bytes())
    raw[0:4] = b"XXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError) as exc:
        load_checkpoint(p)
    assert exc.value.offset == 0


def test_checkpoint_truncated_and_trailing(tmp_path):
    p = tmp_path / "m.bpn"
    save_checkpoint(_trained_like_net(), p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-10])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(p)
    p.write_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(p)


def test_checkpoint_wrong_blob_size(tmp_path):
    p = tmp_path / "m.bpn"
    save_checkpoint(_trained_like_net(), p)
    raw = bytearray(p.read_bytes())
    (n,) = struct.unpack_from("<I", raw, 4)
    at = 8 + n + 4
    struct.pack_into("<I", raw, at, 7)
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError) as exc:
        load_checkpoint(p)
    assert exc.value.offset == at
