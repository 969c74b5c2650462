import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentlink import chansim
from latentlink.chansim import RadioSpec, ScattererField, channel_at, channel_gain


@pytest.fixture(scope="module")
def spec():
    return RadioSpec()


@pytest.fixture(scope="module")
def field(spec):
    return ScattererField.generate(7, spec)


def test_defaults_follow_the_hardware_table(spec):
    assert spec.n_antennas == 40
    assert spec.subcarriers == 16 and spec.carrier_hz == 2.14e9 and spec.bandwidth_hz == 20e6
    assert spec.input_width == 1280


def test_channel_is_deterministic(spec, field):
    a = channel_at((3.0, -4.0), 5, field, spec)
    b = channel_at((3.0, -4.0), 5, field, spec)
    assert a.g.shape == (40, 16)
    assert np.array_equal(a.g, b.g)
    assert np.all(np.isfinite(a.g)) and a.gain > 0


def test_out_of_bounds_rejected(spec, field):
    with pytest.raises(ValueError):
        channel_at((500.0, 0.0), 0, field, spec)


@pytest.mark.parametrize("exponent", [1.0, 1.5])
def test_line_of_sight_path_loss(exponent):
    spec = RadioSpec(array_positions=((0.0, 0.0, 1.5),), decay_exponent=exponent, jitter_std=0.0)
    empty = ScattererField(np.zeros((0, 2)), np.zeros(0, dtype=complex), seed=0)
    near = channel_at((10.0, 5.0), 0, empty, spec).gain
    far = channel_at((20.0, 10.0), 0, empty, spec).gain
    decay = lambda d: (1.0 / d) ** exponent
    d = np.hypot(10.0, 5.0)
    assert far / near == pytest.approx(decay(2 * d) ** 2 / decay(d) ** 2, rel=1e-12)


def test_spatial_correlation_decays(spec):
    lam = spec.wavelength
    wins = 0
    for seed in range(100):
        f = ScattererField.generate(seed, spec)
        rng = np.random.default_rng(seed)
        p = rng.uniform(-40, 40, 2)
        ang = rng.uniform(0, 2 * np.pi)
        u = np.array([np.cos(ang), np.sin(ang)])
        g0 = channel_at(p, 0, f, spec).g
        near = chansim.correlation(g0, channel_at(p + u * lam / 16, 0, f, spec).g)
        far = chansim.correlation(g0, channel_at(p + u * lam * 12, 0, f, spec).g)
        wins += near > far
    assert wins >= 95


def test_channel_continuity(spec, field):
    p = np.array([5.0, 7.0])
    g0 = channel_at(p, 2, field, spec).g
    errs = [np.linalg.norm(channel_at(p + d, 2, field, spec).g - g0) for d in (1e-2, 1e-3, 1e-4)]
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-2 * np.linalg.norm(g0)


def test_snr_unit_and_zero_cases():
    g = np.zeros((1, 1), dtype=complex)
    g[0, 0] = 1.0
    assert chansim.snr(g, 1.0, 1.0) == 1.0
    assert chansim.snr(g, 0.0, 1.0) == 0.0
    assert chansim.required_power(g, 1.0, 1.0) == 1.0
    assert chansim.required_power(2 * np.ones((2, 1)), 1.0, 1.0) == pytest.approx(
        chansim.required_power(np.sqrt(2) * np.ones((2, 1)), 1.0, 1.0) / 2)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 10.0), st.floats(1e-6, 1.0), st.floats(0.1, 100.0))
def test_snr_identities(seed, power, noise, threshold):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((4, 3)) + 1j * rng.standard_normal((4, 3))
    assert chansim.snr(g, power, noise) * noise / power == pytest.approx(channel_gain(g), rel=1e-12)
    rho = chansim.required_power(g, threshold, noise)
    assert chansim.snr(g, rho, noise) == pytest.approx(threshold, rel=1e-9)


def test_singular_channel():
    with pytest.raises(chansim.SingularChannel):
        chansim.required_power(np.zeros((2, 2), dtype=complex), 1.0, 1.0)


def test_feasibility_boundaries(spec):
    assert chansim.feasible(spec.power_budget, spec)
    assert not chansim.feasible(spec.power_budget * 1.001, spec)
    assert chansim.feasible(0.0, spec)


def test_gain_smooth_along_track(spec, field):
    from latentlink.envsim import CarEnv, EnvSpec
    geo = CarEnv(EnvSpec(frame_size=16)).geometry
    gains = []
    for s in np.linspace(0, geo.length, 400, endpoint=False):
        i = int(np.searchsorted(geo.cum, s, side="right") - 1)
        gains.append(channel_at(geo.a[i] + geo.seg_dir[i] * (s - geo.cum[i]), 0, field, spec).gain)
    gains = np.array(gains)
    assert np.all(np.isfinite(gains)) and np.all(gains > 0)
    span_db = 10 * np.log10(gains.max() / gains.min())
    assert 4.0 < span_db < 12.0


def test_field_round_trip(tmp_path, spec, field):
    field.save(tmp_path / "f.txt")
    loaded = ScattererField.load(tmp_path / "f.txt")
    assert loaded.seed == field.seed
    assert np.allclose(channel_at((1.0, 2.0), 3, loaded, spec).g, channel_at((1.0, 2.0), 3, field, spec).g)


def test_trace_round_trip(tmp_path, spec, field):
    snaps = [channel_at((float(t), 0.0), t, field, spec) for t in range(3)]
    man, binp = chansim.write_trace(tmp_path / "trace", snaps)
    assert "antennas=40" in man.read_text() and "slots=3" in man.read_text()
    back = chansim.read_trace(tmp_path / "trace")
    assert np.array_equal(back, np.stack([s.g for s in snaps]))
    assert np.array_equal(np.frombuffer(binp.read_bytes(), "<f8")[:2],
                          [snaps[0].g[0, 0].real, snaps[0].g[0, 0].imag])


def test_smoke_radio_dimensions():
    r = chansim.smoke_radio()
    assert r.n_antennas == 8 and r.subcarriers == 4 and r.input_width == 64
