"""Finite-difference checks of every trained loss on small float64 instances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .agent import ActorCritic, AgentConfig
from .control_jepa import ControlJepa, ControlJepaConfig, ExperienceBatch, ImaginedTrajectory, \
    LatentControlState, world_model_loss
from .scheduler import PowerConfig, PowerPredictor, power_loss
from .substrate import functional as F
from .substrate import tensor as T
from .substrate.gradcheck import grad_check, relative_error
from .substrate.tensor import Tensor
from .wireless_jepa import WirelessJepa, WirelessJepaConfig, wireless_loss

TOLERANCE = 1e-3


@dataclass
class SuiteResult:
    name: str
    worst: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.worst <= TOLERANCE

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name:18s} worst={self.worst:.2e} entries={self.checked}"


def _report(name, report) -> SuiteResult:
    return SuiteResult(name, report.worst, report.checked)


def check_world_model(seed: int = 0) -> SuiteResult:
    # the balanced KL has no scalar antiderivative; its plain-KL twin has the same value
    cfg = ControlJepaConfig(frame_size=32, feature_size=24, hidden_size=16, groups=4, classes=5, head_units=12)
    model = ControlJepa(cfg, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    actions = rng.integers(0, 5, (2, 2))
    actions[:, 0] = -1
    terminals = np.array([[False, True], [False, False]])
    batch = ExperienceBatch(rng.random((2, 2, 32, 32)), actions, rng.random((2, 2)) * 0.01, terminals)
    # the start state is drawn once: a draw inside the loss can flip under a perturbation
    start = model.initial_state(2, np.random.default_rng(seed + 3))

    def loss():
        return world_model_loss(model, batch, np.random.default_rng(seed + 2), straight_through=False,
                                start=start, balanced=False).loss

    # scaled rewards make the loss large; a 1e-5 step keeps round-off off the small entries
    report = grad_check(loss, model.params, epsilon=1e-5, tolerance=TOLERANCE, max_entries=6)
    return _report("world_model_loss", report)


def check_kl_split(mix: float = 0.8, seed: int = 0, eps: float = 1e-6) -> SuiteResult:
    """Balanced-KL gradients equal (1 - mix) and mix times the plain-KL gradients."""
    rng = np.random.default_rng(seed)
    q, p = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    qt, pt = Tensor(q, requires_grad=True), Tensor(p, requires_grad=True)
    T.sum_(F.kl_balanced(qt, pt, mix)).backward()

    def plain():
        return float(T.sum_(F.kl_categorical(q, p)).data)

    worst, checked = 0.0, 0
    for arr, grad, scale in ((q, qt.grad, 1.0 - mix), (p, pt.grad, mix)):
        numeric = np.empty_like(arr)
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + eps
            up = plain()
            arr[i] = old - eps
            down = plain()
            arr[i] = old
            numeric[i] = (up - down) / (2 * eps)
        worst = max(worst, float(relative_error(grad, scale * numeric, 1e-6).max()))
        checked += arr.size
    return SuiteResult("kl_balance_split", worst, checked)


def check_wireless(seed: int = 0) -> SuiteResult:
    model = WirelessJepa(WirelessJepaConfig(input_width=24, predictor_size=32), 10, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    g, h = rng.normal(size=(4, 3, 24)), rng.normal(size=(4, 3, 6))
    z = np.zeros((4, 3, 2, 2))
    np.put_along_axis(z, rng.integers(0, 2, (4, 3, 2, 1)), 1.0, axis=-1)
    # a bias feeding batch normalization has a zero gradient; the wider step keeps
    # central-difference round-off on it below the tolerance
    report = grad_check(lambda: wireless_loss(model, g, h, z), model.online_params, epsilon=1e-5,
                        tolerance=TOLERANCE, max_entries=6)
    return _report("wireless_loss", report)


def _trajectory(rng, horizon=5, batch=3, size=6, n_actions=5) -> ImaginedTrajectory:
    h = rng.normal(size=(horizon, batch, size))
    z = np.ones((horizon, batch, 1, 1))
    last = LatentControlState(h[-1], z[-1], np.zeros_like(z[-1]))
    return ImaginedTrajectory(h, z, rng.integers(0, n_actions, (horizon, batch)), rng.normal(size=(horizon, batch)),
                              rng.random((horizon, batch)), last)


def check_critic(seed: int = 0) -> SuiteResult:
    ac = ActorCritic(7, 5, AgentConfig(units=16), np.random.default_rng(seed))
    traj = _trajectory(np.random.default_rng(seed + 1))
    returns = ac.targets(traj)
    report = grad_check(lambda: ac.critic_loss(traj, returns), ac.critic.params, tolerance=TOLERANCE)
    return _report("critic_loss", report)


def check_actor(seed: int = 0) -> SuiteResult:
    ac = ActorCritic(7, 5, AgentConfig(units=16, entropy_scale=0.1), np.random.default_rng(seed))
    traj = _trajectory(np.random.default_rng(seed + 1))
    returns = ac.targets(traj)
    report = grad_check(lambda: ac.actor_loss(traj, returns), ac.actor.params, tolerance=TOLERANCE)
    return _report("actor_loss", report)


def check_power(seed: int = 0) -> SuiteResult:
    model = PowerPredictor(PowerConfig(), np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    c, target = rng.normal(size=(4, 16)), rng.exponential(0.3, 4)
    report = grad_check(lambda: power_loss(model, c, target), model.params, tolerance=TOLERANCE, max_entries=8)
    return _report("power_loss", report)


CHECKS = (check_world_model, check_kl_split, check_wireless, check_critic, check_actor, check_power)


def run_suite(seed: int = 0) -> list[SuiteResult]:
    with T.precision(np.float64):
        return [check(seed) for check in CHECKS]
