import csv
import os

import numpy as np
import pytest

from backend.config import load_scenario, with_overrides
from backend.errors import ConfigError, ParameterError
from backend.fluid import (
    ExogenousInputs,
    FluidState,
    derivatives,
    integrate,
    retransmission_rate_fluid,
    run_fluid,
    tandem_inputs,
)

from .conftest import make_scenario

SCENARIOS = os.path.join(os.path.dirname(__file__), "..", "data", "scenarios")


def tandem_slowdown(duration=60.0):
    cfg = load_scenario(os.path.join(SCENARIOS, "tandem_slowdown.conf"))
    return with_overrides(
        cfg,
        run={"duration": duration},
        workload={"segments": [{"start": 0.0, "end": duration, "rate": 53.3}]},
    )


def test_derivatives_balance_inflow_and_service():
    state = FluidState(q1=5, q2=5, lambda1=10, r1=1, r2_prime=2, nu1=3, mu1=20, lambda2=7, r2=1, nu2=2, mu2=4)
    assert derivatives(state) == (-4.0, 6.0)


def test_empty_queue_cannot_drain():
    assert derivatives(FluidState(q1=0, q2=0, mu1=10, mu2=10)) == (0.0, 0.0)


def test_negative_rates_are_rejected():
    with pytest.raises(ParameterError):
        derivatives(FluidState(lambda2=-1.0))


def test_constant_net_inflow_grows_linearly():
    trajectory = integrate(FluidState(), ExogenousInputs(lambda2=200.0), dt=0.01, t_end=1.0)
    assert trajectory.t[-1] == pytest.approx(1.0)
    assert trajectory.q2[-1] == pytest.approx(200.0, abs=1e-6)
    assert np.all(trajectory.q1 == 0.0)


def test_equilibrium_is_flat():
    inputs = ExogenousInputs(lambda1=50.0, mu1=50.0, lambda2=100.0, mu2=100.0)
    trajectory = integrate(FluidState(q1=10.0), inputs, dt=0.01, t_end=2.0)
    assert np.allclose(trajectory.q1, 10.0)
    assert np.allclose(trajectory.q2, 0.0)


def test_draining_queue_stops_at_zero():
    trajectory = integrate(FluidState(q2=5.0), ExogenousInputs(mu2=100.0), dt=0.01, t_end=0.2)
    assert trajectory.q2.min() >= 0.0
    assert trajectory.q2[-1] == 0.0


@pytest.mark.parametrize("dt,t_end", [(0.0, 1.0), (0.06, 1.0), (0.01, -1.0)])
def test_integrate_validates_its_grid(dt, t_end):
    with pytest.raises(ParameterError):
        integrate(FluidState(), ExogenousInputs(), dt=dt, t_end=t_end, t1=0.5)


def test_retransmission_rate_counts_outlasted_offsets():
    offsets = (0.5, 1.5, 3.5)
    assert retransmission_rate_fluid(5.0, lambda s: 10.0, lambda s: 2.0, offsets) == 20.0
    assert retransmission_rate_fluid(1.0, lambda s: 10.0, lambda s: 2.0, offsets) == 10.0
    assert retransmission_rate_fluid(5.0, lambda s: 10.0, lambda s: 0.1, offsets) == 0.0


def test_trajectory_sampling_and_csv(tmp_path):
    trajectory = integrate(FluidState(), ExogenousInputs(lambda2=10.0), dt=0.01, t_end=1.0)
    assert trajectory.at(0.5) == pytest.approx(5.0)
    coarse = trajectory.resample(0.25)
    assert list(coarse.t) == [0.0, 0.25, 0.5, 0.75, 1.0]
    path = coarse.write(str(tmp_path / "fluid.csv"))
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["t", "q1", "q2", "r2_prime"]
    assert len(rows) == 6


def test_fluid_model_needs_two_proxies():
    with pytest.raises(ConfigError) as info:
        tandem_inputs(make_scenario(topology__proxies=1))
    assert info.value.key == "topology.proxies"


def test_tandem_without_overload_stays_empty():
    cfg = make_scenario(topology__proxies=2, workload__rate=20, run__duration=5, link__loss=0)
    trajectory = run_fluid(cfg, dt=0.005)
    assert trajectory.q1.max() < 1e-9
    assert trajectory.q2.max() < 1e-9
    assert trajectory.r2_prime.max() == 0.0


def test_slowdown_fills_the_downstream_queue_first():
    trajectory = run_fluid(tandem_slowdown())
    onset = trajectory.t[np.flatnonzero(trajectory.r2_prime > 0)[0]]
    assert onset >= 30.0 + 0.5
    assert trajectory.at(29.9, "q2") < 1e-6
    assert trajectory.at(30.0, "q2") < 1.0
    assert trajectory.at(onset, "q2") > 50.0
    assert trajectory.at(onset, "q1") < 1e-6
    assert trajectory.q1[-1] > trajectory.at(onset, "q1")
    # q2 keeps growing while the slowdown lasts
    assert np.all(np.diff(trajectory.q2[trajectory.t >= 30.0]) >= -1e-9)


def test_step_halving_barely_moves_the_end_state():
    cfg = tandem_slowdown(duration=45.0)
    coarse = run_fluid(cfg, dt=0.002)
    fine = run_fluid(cfg, dt=0.001)
    assert fine.q2[-1] == pytest.approx(coarse.q2[-1], rel=1e-3)


def test_tandem_follows_every_timer_of_the_chain():
    inputs = tandem_inputs(tandem_slowdown(duration=45.0))
    assert inputs.offsets == (0.5, 1.5, 3.5, 7.5, 15.5, 31.5)
    assert inputs.end_to_end_offsets == (0.5, 1.5, 3.5, 7.5, 11.5, 15.5, 19.5, 23.5, 27.5, 31.5)
    integrate(FluidState(), inputs, inputs.dt, 45.0)
    state = inputs.current
    assert state.r2_prime > 0
    # p2's own Invite copies and the uac's Bye copies come on top of p1's copies
    assert state.r2 > state.r2_prime
    assert state.r1 > 0


def test_redundant_responses_add_load():
    cfg = tandem_slowdown(duration=45.0)
    quiet = with_overrides(cfg, fluid={"include_redundant_responses": False})
    assert run_fluid(cfg).q2[-1] > run_fluid(quiet).q2[-1]
