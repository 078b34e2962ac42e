from collections import deque

import pytest

from backend.controllers import (
    CONTROLLERS,
    BangBangParams,
    BangBangState,
    Mode,
    OccupancyParams,
    PiControllerState,
    Placement,
    RateOccupancyParams,
    RetryAfterParams,
    RrrcParams,
    RtdcParams,
    RtqcConfig,
    Verdict,
    WindowEvent,
    WindowParams,
    WindowState,
    bangbang_decide,
    build_controller,
    estimate_round_trip_delay,
    occupancy_update,
    pi_update,
    priority_enqueue,
    priority_reject_probability,
    rate_target_from_delay,
    rate_target_from_occupancy,
    retry_after_duration,
    rtqc_probability,
    rtqc_tune_thresholds,
    window_decide,
)
from backend.errors import ConfigError, ConsistencyError, ParameterError
from backend.sip import MessageKind, SipMessage, Transaction


def message(kind=MessageKind.INVITE, transaction=Transaction.INVITE):
    return SipMessage(1, 1, kind, transaction, "uac1", "p1", "uac1", "p1")


class StubServer:
    """Just enough of SipServer for the hosted controllers"""

    def __init__(self, **values):
        self.id = "p1"
        self.clock = 0.0
        self.queue_length = 0
        self.timer_count = 0
        self.mu_now = 100.0
        self.rho = 0.0
        self.coin = True
        self.invites = 0
        self.sojourn = 0.0
        self.rtt = []
        self.departures = 0
        self.ratio = None
        self.published = []
        self.recorded = []
        self.__dict__.update(values)

    def occupancy(self, window):
        return self.rho

    def record(self, variable, value):
        self.recorded.append((variable, value))

    def draw_control(self, p):
        return self.coin

    def uniform_control(self):
        return 0.0

    def take_invite_arrivals(self):
        return self.invites

    def take_mean_sojourn(self):
        return self.sojourn

    def take_rtt_samples(self):
        samples, self.rtt = self.rtt, []
        return samples

    def take_original_departures(self):
        return self.departures

    def redundant_ratio(self, window, denominator):
        return self.ratio

    def publish_rate_target(self, target):
        self.published.append(target)


def test_bangbang_hysteresis():
    state = BangBangState(high_threshold=10, low_threshold=5)
    verdict = bangbang_decide(state, 11, MessageKind.INVITE)
    assert verdict.rejected
    assert verdict.state.mode is Mode.OVERLOAD

    # still overloaded between the thresholds
    verdict = bangbang_decide(verdict.state, 7, MessageKind.INVITE)
    assert verdict.rejected

    verdict = bangbang_decide(verdict.state, 4, MessageKind.INVITE)
    assert verdict.verdict is Verdict.ACCEPT
    assert verdict.state.mode is Mode.UNDERLOAD


def test_bangbang_never_rejects_non_invites():
    state = BangBangState(10, 5, Mode.OVERLOAD)
    assert not bangbang_decide(state, 50, MessageKind.BYE).rejected
    assert not bangbang_decide(state, 50, MessageKind.INVITE, new_call=False).rejected


def test_bangbang_thresholds_must_be_ordered():
    with pytest.raises(ParameterError):
        BangBangState(5, 5)


def test_occupancy_update_moves_toward_the_target_and_clamps():
    assert occupancy_update(0.5, 0.9, 0.8, 0.5) == pytest.approx(0.55)
    assert occupancy_update(0.0, 0.1, 0.8, 0.5) == 0.0
    assert occupancy_update(0.9, 1.0, 0.2, 2.0) == 1.0
    with pytest.raises(ParameterError):
        occupancy_update(0.0, 0.5, 0.8, 0.0)


@pytest.mark.parametrize("size,expected", [(0, 0.0), (49, 0.0), (50, 0.0), (75, 0.5), (100, 1.0), (500, 1.0)])
def test_priority_ramp(size, expected):
    assert priority_reject_probability(size, (50, 100)) == pytest.approx(expected)


def test_priority_ramp_needs_ordered_thresholds():
    assert priority_reject_probability(1000, None) == 0.0
    with pytest.raises(ConfigError):
        priority_reject_probability(10, (100, 50))


def test_priority_enqueue_separates_invites():
    high, low = deque(), deque()
    assert priority_enqueue(message(MessageKind.BYE, Transaction.BYE), high, low) is Placement.HIGH
    assert priority_enqueue(message(), high, low) is Placement.LOW
    assert len(high) == 1 and len(low) == 1


def test_priority_enqueue_rejects_new_invites_on_the_ramp():
    high, low = deque(), deque([message()] * 100)
    assert priority_enqueue(message(), high, low, (50, 100), u=0.3) is Placement.REJECTED
    assert priority_enqueue(message(), high, low, (50, 100), u=0.3, new_call=False) is Placement.LOW
    assert priority_enqueue(message(MessageKind.ACK), high, low, (50, 100), u=0.0) is Placement.HIGH


def test_priority_queue_serves_high_first():
    controller = build_controller("priority", CONTROLLERS["priority"].params_model(two_threshold=False))
    queue = controller.make_queue(StubServer())
    invite, ack = message(), message(MessageKind.ACK)
    assert queue.offer(invite, True)
    assert queue.offer(ack, False)
    assert len(queue) == 2
    assert queue.popleft() is ack
    assert queue.popleft() is invite


def test_window_counts_outstanding_calls():
    state = WindowState(window_size=2)
    first = window_decide(state, WindowEvent.NEW_CALL)
    second = window_decide(first.state, WindowEvent.NEW_CALL)
    third = window_decide(second.state, WindowEvent.NEW_CALL)
    assert first.verdict is Verdict.FORWARD
    assert second.verdict is Verdict.FORWARD
    assert third.rejected
    released = window_decide(third.state, WindowEvent.CALL_ANSWERED)
    assert released.state.outstanding == 1


def test_window_cannot_go_below_zero():
    with pytest.raises(ConsistencyError):
        window_decide(WindowState(2), WindowEvent.CALL_ANSWERED)


def test_zero_window_rejects_everything():
    assert window_decide(WindowState(0), WindowEvent.NEW_CALL).rejected


def test_window_controller_tracks_routes_separately():
    controller = build_controller("window", WindowParams(size=1))
    server = StubServer()
    assert controller.admit_forward(server, message(), "p2").verdict is Verdict.FORWARD
    assert controller.admit_forward(server, message(), "p2").rejected
    assert controller.admit_forward(server, message(), "uas-alt").verdict is Verdict.FORWARD
    controller.on_answered(server, "p2")
    assert controller.admit_forward(server, message(), "p2").verdict is Verdict.FORWARD


def test_rate_targets():
    assert rate_target_from_occupancy(100.0, 1.0, 0.8) == pytest.approx(80.0)
    assert rate_target_from_occupancy(100.0, 0.0, 0.8, 500.0) == 500.0
    assert rate_target_from_occupancy(100.0, 0.1, 0.8, 500.0) == 500.0
    assert rate_target_from_delay(100.0, 0.4, 0.2) == pytest.approx(50.0)
    assert rate_target_from_delay(100.0, 0.0, 0.2, 300.0) == 300.0


def test_retry_after_duration():
    assert retry_after_duration(250, 50, 100.0) == pytest.approx(2.0)
    assert retry_after_duration(10, 50, 100.0) == 0.0
    with pytest.raises(ParameterError):
        retry_after_duration(10, 5, 0.0)


def test_rtqc_probability_is_piecewise_linear():
    cfg = RtqcConfig(q_rmin=10, q_rmax=20, p_min=0.2)
    assert rtqc_probability(5, cfg) == 1.0
    assert rtqc_probability(10, cfg) == 1.0
    assert rtqc_probability(20, cfg) == 0.2
    assert rtqc_probability(100, cfg) == 0.2
    for k in range(1, 12):
        q_r = 10 + 10 * k / 12
        assert abs(rtqc_probability(q_r, cfg) - (1.0 - 0.8 * k / 12)) <= 1e-12, q_r


def test_rtqc_thresholds_follow_the_departure_rate():
    cfg = RtqcConfig(q_rmin=1, q_rmax=2)
    assert rtqc_tune_thresholds(100.0, cfg, t1=0.5) == (pytest.approx(50.0), pytest.approx(3200.0))
    assert rtqc_tune_thresholds(100.0, cfg, horizon=4.0) == (pytest.approx(50.0), pytest.approx(400.0))
    with pytest.raises(ParameterError):
        rtqc_tune_thresholds(-1.0, cfg)


def test_rtqc_config_validation():
    with pytest.raises(ParameterError):
        RtqcConfig(q_rmin=10, q_rmax=5)
    with pytest.raises(ParameterError):
        RtqcConfig(q_rmin=1, q_rmax=5, p_min=0.0)
    # no departures collapses both thresholds
    collapsed = RtqcConfig(q_rmin=0, q_rmax=0)
    assert rtqc_probability(0, collapsed) == 1.0
    assert rtqc_probability(3, collapsed) == collapsed.p_min


def test_pi_update_velocity_form():
    ctrl = PiControllerState(setpoint=0.1, kp=0.1, ki=0.05, output=1.0, lower=0.2, upper=1.0)
    assert pi_update(ctrl, 0.5, 1.0) == pytest.approx(0.94)
    assert ctrl.accumulator == pytest.approx(-0.02)
    assert ctrl.last_error == pytest.approx(-0.4)


def test_pi_accumulator_freezes_while_saturated():
    ctrl = PiControllerState(setpoint=0.1, kp=0.1, ki=0.05, output=1.0, lower=0.2, upper=1.0)
    assert pi_update(ctrl, 0.0, 1.0) == 1.0
    assert ctrl.accumulator == 0.0


def test_pi_holds_output_on_non_finite_measurement():
    ctrl = PiControllerState(setpoint=0.1, kp=0.1, ki=0.05, output=0.7)
    assert pi_update(ctrl, float("nan"), 1.0) == 0.7
    assert ctrl.flagged == 1
    with pytest.raises(ParameterError):
        pi_update(ctrl, 0.3, 0.0)


def test_round_trip_estimate_skips_invalid_pairs():
    assert estimate_round_trip_delay([(0.0, 1.0), (0.0, 3.0)], 0.5, None) == pytest.approx(2.0)
    assert estimate_round_trip_delay([(2.0, 1.0)], 0.5, 0.4) == 0.4
    assert estimate_round_trip_delay([], 0.5, None) is None
    with pytest.raises(ParameterError):
        estimate_round_trip_delay([], 0.0, None)


def test_unknown_controller_name():
    with pytest.raises(ConfigError) as info:
        build_controller("nope")
    assert info.value.key == "controller.name"


def test_every_controller_builds_with_defaults():
    for name in CONTROLLERS:
        controller = build_controller(name)
        assert controller.name == name


def test_occupancy_controller_rejects_after_a_hot_tick():
    controller = build_controller("occupancy", OccupancyParams(target=0.8, gain=0.5))
    server = StubServer(rho=1.0)
    assert controller.admit(server, message()).verdict is Verdict.ACCEPT
    controller.on_tick(server, 1.0, 0.5)
    assert controller.p == pytest.approx(0.1)
    assert controller.admit(server, message()).rejected
    assert ("p_reject", pytest.approx(0.1)) in server.recorded


def test_bangbang_controller_records_mode_switches():
    controller = build_controller("bangbang", BangBangParams(high=3, low=1))
    server = StubServer(queue_length=4)
    assert controller.admit(server, message()).rejected
    assert server.recorded == [("mode", 1.0)]


def test_retry_after_controller_suggests_drain_time():
    controller = build_controller("retry_after", RetryAfterParams(high=100, q_target=20))
    assert controller.admit(StubServer(queue_length=100), message()).verdict is Verdict.ACCEPT
    verdict = controller.admit(StubServer(queue_length=220, mu_now=100.0), message())
    assert verdict.rejected
    assert verdict.retry_after == pytest.approx(2.0)


def test_rate_controller_publishes_and_thins():
    controller = build_controller("rate_occupancy", RateOccupancyParams(target=0.8))
    server = StubServer(rho=1.0, invites=50)
    controller.on_tick(server, 1.0, 0.5)
    assert server.published == [pytest.approx(80.0)]

    sender = build_controller("rate_occupancy")
    uac = StubServer(clock=0.0)
    assert sender.admit_forward(uac, message(), "p1").verdict is Verdict.FORWARD
    sender.set_rate_target("p1", 2.0, 0.0)
    assert sender.admit_forward(uac, message(), "p1").verdict is Verdict.FORWARD
    assert sender.admit_forward(uac, message(), "p1").rejected
    uac.clock = 0.5
    assert sender.admit_forward(uac, message(), "p1").verdict is Verdict.FORWARD


def test_rtqc_controller_adapts_thresholds():
    controller = build_controller("rtqc")
    server = StubServer(departures=50, timer_count=0)
    controller.on_tick(server, 0.5, 0.5)
    assert controller.departure_rate == pytest.approx(100.0)
    assert controller.cfg.q_rmin == pytest.approx(50.0)
    assert controller.cfg.q_rmax == pytest.approx(400.0)
    assert controller.admit_retransmission(server, message())


def test_rrrc_controller_throttles_on_redundancy():
    controller = build_controller("rrrc")
    server = StubServer(ratio=None)
    controller.on_tick(server, 1.0, 0.5)
    assert controller.pi.output == 1.0
    server.ratio = 0.6
    controller.on_tick(server, 1.5, 0.5)
    assert controller.pi.output < 1.0
    server.coin = False
    assert not controller.admit_retransmission(server, message())


def test_rtdc_controller_discards_impossible_samples():
    controller = build_controller("rtdc", RtdcParams(d_target=0.5, alpha=1.0))
    server = StubServer(rtt=[(0.0, 2.0), (3.0, 1.0)])
    controller.on_tick(server, 1.0, 0.5)
    assert controller.estimate == pytest.approx(2.0)
    assert controller.discarded == 1
    assert controller.pi.output < 1.0
    assert controller.pi.setpoint == pytest.approx(0.35)


def test_rtdc_margin_must_leave_a_positive_setpoint():
    with pytest.raises(ValueError):
        RtdcParams(d_target=0.1, margin=0.15)


@pytest.mark.parametrize("name", ["rtqc", "rrrc", "rtdc"])
def test_retransmission_controllers_shed_new_calls_with_the_same_coin(name):
    controller = build_controller(name)
    server = StubServer(coin=False, timer_count=10_000, departures=10)
    controller.on_tick(server, 0.5, 0.5)
    if name != "rtqc":
        controller.pi.output = 0.5
    assert controller.admit_forward(server, message(), "p2").rejected
    assert not controller.admit_retransmission(server, message())
    server.coin = True
    assert controller.admit_forward(server, message(), "p2").verdict is Verdict.FORWARD


def test_retransmission_controller_can_leave_calls_alone():
    controller = build_controller("rrrc", RrrcParams(shed_calls=False))
    controller.pi.output = 0.2
    server = StubServer(coin=False)
    assert controller.admit_forward(server, message(), "p2").verdict is Verdict.FORWARD
    assert not controller.admit_retransmission(server, message())


def test_full_admission_probability_needs_no_draw():
    controller = build_controller("rrrc")
    server = StubServer(coin=False)
    assert controller.admit_forward(server, message(), "p2").verdict is Verdict.FORWARD
    assert controller.admit_retransmission(server, message())


def test_priority_queue_tracks_waiting_originals():
    controller = build_controller("priority", CONTROLLERS["priority"].params_model(th_low=1, th_high=2))
    queue = controller.make_queue(StubServer())
    original = message()
    repeat = SipMessage(2, 1, MessageKind.INVITE, Transaction.INVITE, "uac1", "p1", "uac1", "p1", copy_index=1)
    assert queue.offer(original, True)
    assert queue.absorbs(repeat)
    assert not queue.absorbs(SipMessage(3, 1, MessageKind.INVITE, Transaction.INVITE, "p1", "uas", "p1", "uas", local=True))
    assert queue.popleft() is original
    assert queue.waiting == {}
    assert not queue.absorbs(repeat)


def test_priority_ramp_can_count_a_subset_of_the_low_queue():
    high, low = deque(), deque([message(), message()])
    assert priority_enqueue(message(), high, low, (1, 2), u=0.5) is Placement.REJECTED
    assert priority_enqueue(message(), high, low, (1, 2), u=0.5, low_size=1) is Placement.LOW
