import numpy as np
import pytest

from latentlink import substrate as S
from latentlink.chansim import ScattererField, channel_at, interleave, smoke_radio
from latentlink.control_jepa import ControlJepa, ControlJepaConfig
from latentlink.wireless_jepa import ChannelEncoder, WirelessJepa, WirelessJepaConfig, wireless_loss


@pytest.fixture(autouse=True)
def float64():
    with S.precision(np.float64):
        yield


WIDTH = 24
LATENT = 10


def model(seed=0, **kw):
    cfg = WirelessJepaConfig(**{"input_width": WIDTH, **kw})
    return WirelessJepa(cfg, LATENT, np.random.default_rng(seed))


def latents(rng, b, t):
    h = rng.normal(size=(b, t, 6))
    z = np.zeros((b, t, 2, 2))
    np.put_along_axis(z, rng.integers(0, 2, (b, t, 2, 1)), 1.0, axis=-1)
    return h, z


def sequence(seed=0, b=4, t=3):
    rng = np.random.default_rng(seed)
    h, z = latents(rng, b, t)
    return rng.normal(size=(b, t, WIDTH)), h, z


def test_default_width_matches_radio():
    assert WirelessJepaConfig().input_width == 1280
    cfg = WirelessJepaConfig()
    assert (cfg.embed_size, cfg.predictor_size, cfg.lr, cfg.lr_decay) == (16, 256, 5e-3, 0.97)
    assert (cfg.batch_size, cfg.ema_decay, cfg.weight_decay) == (100, 0.99, 3e-3)


def test_encoder_accepts_real_channels():
    radio = smoke_radio()
    field = ScattererField.generate(0, radio)
    g = np.stack([interleave(channel_at((x, 0.0), 0, field, radio).g) for x in (0.0, 1.0, 2.0)])
    enc = ChannelEncoder(WirelessJepaConfig(input_width=g.shape[-1]), np.random.default_rng(0))
    assert enc(g).shape == (3, 16)


@pytest.mark.parametrize("bad", [dict(ema_decay=1.2), dict(ema_decay=-0.1), dict(embed_size=1)])
def test_config_invariants(bad):
    with pytest.raises(ValueError):
        WirelessJepaConfig(**bad)


def test_encoder_rejects_wrong_width():
    with pytest.raises(ValueError):
        model().encode_csi(np.zeros((2, WIDTH + 2)))


def test_eval_encoding_is_deterministic():
    m = model().eval()
    g = np.random.default_rng(1).normal(size=(5, WIDTH))
    a = m.encode_csi(g).data
    assert a.shape == (5, 16)
    assert np.array_equal(a, m.encode_csi(g).data)
    np.testing.assert_allclose(m.encode_csi(g[:1]).data, a[:1], atol=1e-12)


def test_target_matches_online_after_copy():
    m = model()
    g = np.random.default_rng(2).normal(size=(6, WIDTH))
    assert np.array_equal(m.encode_csi(g).data, m.target_encode_csi(g).data)


def test_ema_step_formula():
    m = model()
    old = {k: v.data.copy() for k, v in m.target.params.items()}
    rng = np.random.default_rng(3)
    for p in m.encoder.params.values():
        p.data[...] += rng.normal(size=p.shape)
    m.ema_step()
    for (k, tgt), src in zip(m.target.params.items(), m.encoder.params.values()):
        np.testing.assert_allclose(tgt.data, 0.99 * old[k] + 0.01 * src.data, rtol=0, atol=1e-14)


def test_ema_copies_normalization_statistics():
    m = model()
    m.encode_csi(np.random.default_rng(4).normal(size=(8, WIDTH)) * 3 + 1)
    m.ema_step()
    src = [mod.buffers for mod in m.encoder.modules() if hasattr(mod, "buffers")]
    dst = [mod.buffers for mod in m.target.modules() if hasattr(mod, "buffers")]
    assert src
    for a, b in zip(src, dst):
        for k in a:
            assert np.array_equal(a[k], b[k]) and a[k] is not b[k]


def test_ema_drifts_monotonically_toward_fixed_online():
    m = model()
    rng = np.random.default_rng(5)
    for p in m.encoder.params.values():
        p.data[...] += rng.normal(size=p.shape)

    def gap():
        return sum(float(np.sum((t.data - s.data) ** 2))
                   for t, s in zip(m.target.params.values(), m.encoder.params.values()))

    gaps = [gap()]
    for _ in range(5):
        m.ema_step()
        gaps.append(gap())
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


def test_predict_next_shapes_and_determinism():
    m = model()
    rng = np.random.default_rng(6)
    c, q = rng.normal(size=(3, 16)), rng.normal(size=(3, 256))
    h, z = latents(rng, 3, 1)
    c1, q1 = m.predict_next(c, q, h[:, 0], z[:, 0])
    c2, q2 = m.predict_next(c, q, h[:, 0], z[:, 0])
    assert c1.shape == (3, 16) and q1.shape == (3, 256)
    assert np.array_equal(c1.data, c2.data) and np.array_equal(q1.data, q2.data)


def test_loss_nonnegative_and_reproducible():
    for seed in range(5):
        g, h, z = sequence(seed)
        a = float(wireless_loss(model(seed), g, h, z).data)
        b = float(wireless_loss(model(seed), g, h, z).data)
        assert a >= 0 and a == b


def test_copy_predictor_on_constant_channel_has_zero_loss(monkeypatch):
    m = model()
    g = np.repeat(np.random.default_rng(7).normal(size=(4, 1, WIDTH)), 2, axis=1)
    h, z = latents(np.random.default_rng(8), 4, 2)
    monkeypatch.setattr(m, "predict_next", lambda c, q, h_, z_: (c, q))
    assert float(wireless_loss(m, g, h, z).data) == 0.0


def test_loss_rejects_misaligned_and_short_sequences():
    g, h, z = sequence()
    with pytest.raises(ValueError):
        wireless_loss(model(), g, h[:, :2], z)
    with pytest.raises(ValueError):
        wireless_loss(model(), g[:, :1], h[:, :1], z[:, :1])


def test_gradients_reach_online_parts_only():
    m = model()
    g, h, z = sequence()
    m.online_params.zero_grad()
    m.target.params.zero_grad()
    wireless_loss(m, g, h, z).backward()
    for p in m.target.params.values():
        assert p.grad is None or not np.any(p.grad)
    for prefix in ("encoder.", "gru.", "head."):
        assert any(np.any(p.grad) for k, p in m.online_params.items() if k.startswith(prefix) and p.grad is not None)


def test_frozen_control_model_receives_no_gradient():
    cfg = ControlJepaConfig(frame_size=32, feature_size=24, hidden_size=6, groups=2, classes=2, head_units=8)
    world = ControlJepa(cfg, np.random.default_rng(0))
    frames = np.random.default_rng(1).random((3, 4, 32, 32))
    states = world.observe_sequence(frames, np.zeros((3, 4), int), world.initial_state(4, np.random.default_rng(2)),
                                    np.random.default_rng(3))
    h = np.stack([s.h for s in states], axis=1)
    z = np.stack([s.z for s in states], axis=1)
    world.params.zero_grad()
    m = model()
    wireless_loss(m, np.random.default_rng(4).normal(size=(4, 3, WIDTH)), h, z).backward()
    for p in world.params.values():
        assert p.grad is None or not np.any(p.grad)


def test_wireless_gradient_check():
    m = model(seed=9)
    g, h, z = sequence(seed=10, b=4, t=3)
    # the first-layer bias is cancelled by batch normalization, so its true gradient is 0;
    # a 1e-5 step keeps the central-difference round-off on it below the tolerance
    report = S.grad_check(lambda: wireless_loss(m, g, h, z), m.online_params, epsilon=1e-5,
                          tolerance=1e-3, max_entries=6)
    assert report.passed, report.summary()


def test_rollout_length_and_determinism():
    m = model().eval()
    rng = np.random.default_rng(11)
    h, z = latents(rng, 2, 7)
    hz = (h.transpose(1, 0, 2), z.transpose(1, 0, 2, 3))
    c0 = rng.normal(size=(2, 16))
    a = m.rollout_csi(c0, hz)
    assert a.shape == (7, 2, 16)
    assert np.array_equal(a, m.rollout_csi(c0, hz))
    # the rollout is the autoregressive unroll of predict_next
    c, q = c0, m.initial_q(2)
    for t in range(7):
        c, q = m.predict_next(c, q, hz[0][t], hz[1][t])
        np.testing.assert_allclose(a[t], c.data, atol=1e-14)


def test_rollout_from_imagined_trajectory():
    cfg = ControlJepaConfig(frame_size=32, feature_size=24, hidden_size=6, groups=2, classes=2, head_units=8)
    world = ControlJepa(cfg, np.random.default_rng(0))
    traj = world.imagine(world.initial_state(3, np.random.default_rng(1)),
                         lambda f, r: r.integers(0, 5, len(f)), 5, np.random.default_rng(2))
    m = model().eval()
    out = m.rollout_csi(np.zeros((3, 16)), traj)
    assert out.shape == (5, 3, 16) and np.all(np.isfinite(out))
