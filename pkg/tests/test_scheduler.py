import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentlink import chansim
from latentlink import substrate as S
from latentlink.agent import ActorCritic, AgentConfig
from latentlink.chansim import ScattererField, smoke_radio
from latentlink.control_jepa import ControlJepa, ControlJepaConfig
from latentlink.envsim import CarEnv, EnvSpec
from latentlink.scheduler import (
    METHODS,
    FrameGate,
    PowerConfig,
    PowerPredictor,
    SchedulerConfig,
    Stack,
    power_loss,
    run_episode,
    select_slot,
    window_cost,
)
from latentlink.wireless_jepa import WirelessJepa, WirelessJepaConfig


@pytest.fixture(autouse=True)
def float64():
    with S.precision(np.float64):
        yield


def brute_force_slot(rho, horizon, kappa, tau, budget):
    """Enumerate every offset and keep the cheapest eligible one (earliest on ties)."""
    best = None
    for t in range(horizon):
        if t < tau or t + kappa > horizon or rho[t] > budget:
            continue
        if best is None or rho[t] < rho[best]:
            best = t
    if best is not None:
        return best, False
    best = None
    for t in range(tau, horizon):
        if best is None or rho[t] < rho[best]:
            best = t
    return best, True


# -- select_slot --------------------------------------------------------------------------
def test_select_slot_worked_example():
    cfg = SchedulerConfig(horizon=5, kappa=1, tau=2, max_power=10.0)
    d = select_slot([5, 2, 9, 1, 4], cfg)
    assert d.slot == 3 and not d.outage and d.planned_power == 1.0
    assert d.feasible.tolist() == [False, False, True, True, True]


def test_single_feasible_slot_wins_regardless_of_power():
    cfg = SchedulerConfig(horizon=4, kappa=1, tau=0, max_power=1.0)
    assert select_slot([3.0, 0.99, 7.0, 2.0], cfg).slot == 1


def test_outage_fallback():
    cfg = SchedulerConfig(horizon=5, kappa=2, tau=1, max_power=1.0)
    d = select_slot([0.1, 4.0, 3.0, 5.0, 2.0], cfg)
    # offset 0 is excluded by tau even though it is the cheapest
    assert d.outage and d.slot == 4 and d.planned_power == 1.0
    assert not d.feasible.any()


def test_equal_powers_pick_earliest_eligible():
    cfg = SchedulerConfig(horizon=8, kappa=3, tau=2, max_power=1.0)
    assert select_slot(np.full(8, 0.5), cfg).slot == 2


def test_window_must_fit():
    cfg = SchedulerConfig(horizon=6, kappa=3, tau=0, max_power=1.0)
    assert select_slot([0.9, 0.8, 0.7, 0.6, 0.1, 0.05], cfg).slot == 3


def test_select_slot_matches_exhaustive_search():
    rng = np.random.default_rng(0)
    for _ in range(100_000):
        horizon = int(rng.integers(2, 15))
        kappa = int(rng.integers(1, horizon + 1))
        tau = int(rng.integers(0, horizon))
        rho = rng.exponential(1.0, horizon)
        if rng.random() < 0.3:
            rho = np.round(rho, 1)       # force ties
        cfg = SchedulerConfig(horizon=horizon, kappa=kappa, tau=tau, max_power=1.0)
        d = select_slot(rho, cfg)
        assert (d.slot, d.outage) == brute_force_slot(rho, horizon, kappa, tau, 1.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 14).flatmap(lambda h: st.tuples(
    st.just(h), st.integers(1, h), st.integers(0, h - 1),
    st.lists(st.floats(0.0, 3.0), min_size=h, max_size=h))))
def test_chosen_slot_honors_constraints(case):
    horizon, kappa, tau, rho = case
    d = select_slot(rho, SchedulerConfig(horizon=horizon, kappa=kappa, tau=tau, max_power=1.0))
    assert d.slot >= tau
    if not d.outage:
        assert d.slot + kappa <= horizon and rho[d.slot] <= 1.0


@pytest.mark.parametrize("rho", [[1.0, 2.0], [1.0, float("nan"), 1.0, 1.0, 1.0, 1.0]])
def test_select_slot_rejects_bad_input(rho):
    with pytest.raises(ValueError):
        select_slot(rho, SchedulerConfig())


@pytest.mark.parametrize("bad", [dict(tau=6), dict(tau=-1), dict(kappa=0), dict(kappa=7), dict(max_power=0.0)])
def test_config_invariants(bad):
    with pytest.raises(ValueError):
        SchedulerConfig(**bad)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.0, 5.0), min_size=8, max_size=8), st.integers(0, 3), st.integers(1, 4))
def test_window_cost_monotone_in_kappa(required, start, kappa):
    cfg = SchedulerConfig(horizon=8, kappa=1, tau=0)
    bits, energy = window_cost(required, start, kappa, cfg)
    bits2, energy2 = window_cost(required, start, kappa + 1, cfg)
    assert bits2 - bits == cfg.bits_per_frame
    assert energy2 >= energy


# -- power predictor -----------------------------------------------------------------------
def test_power_predictor_positive():
    model = PowerPredictor(PowerConfig(), np.random.default_rng(0))
    out = model.predict_power(np.random.default_rng(1).normal(size=(200, 16)) * 50)
    assert out.shape == (200,) and np.all(out > 0)


def test_power_loss_properties():
    model = PowerPredictor(PowerConfig(), np.random.default_rng(0))
    c = np.random.default_rng(2).normal(size=(4, 16))
    assert float(power_loss(model, c, model.predict_power(c)).data) == 0.0
    assert float(power_loss(model, c, np.ones(4)).data) >= 0.0
    with pytest.raises(ValueError):
        power_loss(model, c, np.ones(3))


def test_power_loss_gradient_check():
    model = PowerPredictor(PowerConfig(), np.random.default_rng(3))
    rng = np.random.default_rng(4)
    c, target = rng.normal(size=(4, 16)), rng.exponential(0.3, 4)
    report = S.grad_check(lambda: power_loss(model, c, target), model.params, tolerance=1e-3, max_entries=8)
    assert report.passed, report.summary()


def test_frame_gate_counts_reads():
    gate = FrameGate()
    gate.offer(np.zeros(2))
    gate.read()
    gate.read()
    assert gate.reads == 2


# -- episodes with an untrained stack -----------------------------------------------------------
@pytest.fixture(scope="module")
def deployment():
    with S.precision(np.float64):
        radio = smoke_radio()
        env = CarEnv(EnvSpec(frame_size=32, max_steps=40))
        world = ControlJepa(ControlJepaConfig(frame_size=32, feature_size=32, hidden_size=16, groups=4,
                                              classes=4, head_units=16), np.random.default_rng(0))
        wireless = WirelessJepa(WirelessJepaConfig(input_width=radio.input_width, predictor_size=32),
                                world.cfg.latent_size, np.random.default_rng(1))
        agent = ActorCritic(world.cfg.latent_size, 5, AgentConfig(units=16), np.random.default_rng(2))
        power = PowerPredictor(PowerConfig(units=16), np.random.default_rng(3))
        field = ScattererField.generate(0, radio)
        return Stack(world, wireless, agent, power), env, field, radio


def episode(deployment, method, seed=0, **cfg):
    stack, env, field, radio = deployment
    with S.precision(np.float64):
        return run_episode(stack, env, field, radio, SchedulerConfig(**cfg), seed, method)


@pytest.mark.parametrize("method", METHODS)
def test_accounting_identities(deployment, method):
    m = episode(deployment, method, horizon=6, kappa=3, tau=1)
    assert m.slots == len(m.rewards) == len(m.powers) == len(m.alphas)
    assert m.overhead_bits == sum(m.alphas) * 84 * 84 * 8
    assert m.transmissions == sum(m.alphas)
    assert math.isclose(m.mean_power * m.slots, sum(a * p for a, p in zip(m.alphas, m.powers)), rel_tol=1e-12)
    assert m.mean_power >= 0
    assert all(p == 0.0 for a, p in zip(m.alphas, m.powers) if not a)
    # frames are read only at slots whose transmission got through
    assert m.frame_reads == m.transmissions - m.outages
    assert m.alphas[0] == 1


def test_episode_is_deterministic(deployment):
    a = episode(deployment, "closed_loop", seed=3)
    b = episode(deployment, "closed_loop", seed=3)
    assert a.rewards == b.rewards and a.powers == b.powers and a.alphas == b.alphas


def test_no_prediction_transmits_every_slot(deployment):
    _, _, field, radio = deployment
    m = episode(deployment, "no_prediction")
    assert all(m.alphas) and m.overhead_bits == m.slots * 84 * 84 * 8
    required = [min(chansim.required_power(chansim.channel_at(p, t, field, radio).g, radio.snr_threshold,
                                           radio.noise_power), radio.power_budget)
                for t, p in enumerate(m.positions)]
    assert m.mean_power == pytest.approx(np.mean(required), rel=1e-12)


def test_full_window_closed_loop_degenerates_to_every_slot(deployment):
    m = episode(deployment, "closed_loop", horizon=4, kappa=4, tau=0)
    assert all(m.alphas)


def test_power_agnostic_slots_ignore_the_channel(deployment):
    m = episode(deployment, "power_agnostic", horizon=6, kappa=2, tau=1)
    expected = [int(t < 2) if t < 6 else int(t % 6 >= 4) for t in range(m.slots)]
    assert m.alphas == expected


def test_closed_loop_and_agnostic_send_equally_often(deployment):
    a = episode(deployment, "closed_loop", horizon=5, kappa=2, tau=1)
    b = episode(deployment, "power_agnostic", horizon=5, kappa=2, tau=1)
    for m in (a, b):
        full = m.slots // 5
        assert full >= 2
        assert [sum(m.alphas[5 * k:5 * k + 5]) for k in range(full)] == [2] * full


def test_action_repeat_has_lowest_overhead(deployment):
    overheads = {method: episode(deployment, method, horizon=6, kappa=3, tau=1) for method in METHODS}
    rep = overheads["action_repeat"]
    assert rep.transmissions == math.ceil(rep.slots / 6)
    assert rep.alphas == [int(t % 6 == 0) for t in range(rep.slots)]
    for m in overheads.values():
        assert rep.overhead_bits / rep.slots <= m.overhead_bits / m.slots


def test_flat_power_prediction_picks_earliest_eligible(deployment, monkeypatch):
    stack = deployment[0]
    monkeypatch.setattr(stack.power, "predict_power", lambda c: np.full(len(c), 0.01))
    m = episode(deployment, "closed_loop", horizon=6, kappa=2, tau=2)
    assert m.log and all(entry["offset"] == 2 for entry in m.log)


def test_run_episode_validates(deployment):
    with pytest.raises(ValueError):
        episode(deployment, "telepathy")
    with pytest.raises(ValueError):
        episode(deployment, "closed_loop", max_power=2.0)


def test_stack_rejects_mismatched_models(deployment):
    stack = deployment[0]
    other = PowerPredictor(PowerConfig(embed_size=8), np.random.default_rng(0))
    with pytest.raises(ValueError):
        Stack(stack.world, stack.wireless, stack.agent, other)
