from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hhmon.core import ConfigError
from hhmon.detect import (
    BeamSensor,
    BeamTrip,
    DetectorConfig,
    Direction,
    DoorDetector,
    Sensor,
    TripPairer,
    classify,
    pair_trips,
)

CFG = DetectorConfig()
A, B = Sensor.A, Sensor.B


def window_oracle(dt_ms, spacing_m=Fraction(3, 10), vmin=1, vmax=3):
    """Exact rational check that the implied walking speed is inside the envelope."""
    if dt_ms == 0:
        return False
    v = spacing_m / Fraction(abs(dt_ms), 1000)
    return vmin <= v <= vmax


def edge_oracle(samples, threshold=800, debounce=50):
    """Timestamps of falling edges that survive the debounce."""
    out, armed, last = [], True, None
    for ts, mm in samples:
        if mm > threshold:
            armed = True
        elif mm < threshold and armed:
            armed = False
            if last is None or ts - last >= debounce:
                out.append(ts)
                last = ts
    return out


def max_matching(trips, cfg=CFG):
    """Size of the largest set of disjoint in-window A/B pairs, by exhaustion."""
    n = len(trips)

    def best(i, used):
        if i == n:
            return 0
        if i in used:
            return best(i + 1, used)
        top = best(i + 1, used)
        for j in range(i + 1, n):
            if j not in used and classify(trips[i], trips[j], cfg) is not Direction.UNKNOWN:
                top = max(top, 1 + best(i + 1, used | {j}))
        return top

    return best(0, frozenset())


# -- configuration ----------------------------------------------------------------


def test_default_window():
    lo, hi = CFG.window_ms
    assert lo == pytest.approx(100.0) and hi == pytest.approx(300.0)


@pytest.mark.parametrize("kw", [dict(v_min_mps=3.0, v_max_mps=1.0), dict(v_min_mps=2.0, v_max_mps=2.0),
                                dict(beam_spacing_m=0.0), dict(v_min_mps=0.0)])
def test_bad_config(kw):
    with pytest.raises(ConfigError):
        DetectorConfig(**kw).validate()


# -- beam trips ---------------------------------------------------------------------


def test_falling_edge_trips():
    s = BeamSensor(A, CFG)
    assert s.feed_sample(900, 0) is None
    assert s.feed_sample(700, 10) == BeamTrip(A, 10)


def test_debounce_suppresses_chatter():
    s = BeamSensor(A, CFG)
    trips = [s.feed_sample(mm, ts) for ts, mm in [(0, 900), (10, 700), (20, 900), (40, 700)]]
    assert [t for t in trips if t] == [BeamTrip(A, 10)]


def test_held_low_trips_once():
    s = BeamSensor(A, CFG)
    trips = [s.feed_sample(700, i * 100) for i in range(10)]
    assert [t for t in trips if t] == [BeamTrip(A, 0)]
    assert s.feed_sample(900, 1000) is None
    assert s.feed_sample(700, 1100) == BeamTrip(A, 1100)


def test_exactly_at_threshold_neither_trips_nor_rearms():
    s = BeamSensor(A, CFG)
    assert s.feed_sample(800, 0) is None
    assert s.feed_sample(799, 10) == BeamTrip(A, 10)
    assert s.feed_sample(800, 200) is None
    assert s.feed_sample(700, 300) is None


@given(st.lists(st.tuples(st.integers(0, 200), st.integers(500, 1200)), max_size=80))
def test_trips_match_edge_oracle(steps):
    samples, t = [], 0
    for dt, mm in steps:
        t += dt
        samples.append((t, mm))
    s = BeamSensor(B, CFG)
    got = [trip.ts for ts, mm in samples if (trip := s.feed_sample(mm, ts))]
    assert got == edge_oracle(samples)
    assert all(b - a >= CFG.debounce_ms for a, b in zip(got, got[1:]))


# -- classification -------------------------------------------------------------------


def test_classify_examples():
    assert classify(BeamTrip(A, 0), BeamTrip(B, 150), CFG) is Direction.ENTER
    assert classify(BeamTrip(B, 0), BeamTrip(A, 150), CFG) is Direction.EXIT
    assert classify(BeamTrip(A, 0), BeamTrip(B, 500), CFG) is Direction.UNKNOWN
    assert classify(BeamTrip(A, 0), BeamTrip(A, 150), CFG) is Direction.UNKNOWN


@pytest.mark.parametrize("dt", [99, 100, 300, 301])
def test_classify_window_edges(dt):
    expected = Direction.ENTER if window_oracle(dt) else Direction.UNKNOWN
    assert classify(BeamTrip(A, 0), BeamTrip(B, dt), CFG) is expected


@given(st.integers(-1000, 1000).filter(lambda d: d != 0), st.integers(0, 10**9))
def test_classify_matches_oracle_and_is_antisymmetric(dt, t0):
    a, b = BeamTrip(A, t0), BeamTrip(B, t0 + dt)
    got = classify(a, b, CFG)
    if not window_oracle(dt):
        assert got is Direction.UNKNOWN
    else:
        assert got is (Direction.ENTER if dt > 0 else Direction.EXIT)
    swapped = classify(BeamTrip(B, a.ts), BeamTrip(A, b.ts), CFG)
    mirror = {Direction.ENTER: Direction.EXIT, Direction.EXIT: Direction.ENTER, Direction.UNKNOWN: Direction.UNKNOWN}
    assert swapped is mirror[got]
    assert classify(b, a, CFG) is got


# -- pairing -----------------------------------------------------------------------------


def test_alternating_pairs():
    trips = [BeamTrip(A, 0), BeamTrip(B, 150), BeamTrip(A, 1000), BeamTrip(B, 1200)]
    assert [c.direction for c in pair_trips(trips, CFG)] == [Direction.ENTER, Direction.ENTER]


def test_back_to_back():
    trips = [BeamTrip(A, 0), BeamTrip(B, 150), BeamTrip(A, 400), BeamTrip(B, 550)]
    got = list(pair_trips(trips, CFG))
    assert [c.direction for c in got] == [Direction.ENTER, Direction.ENTER]
    assert len(got) == max_matching(trips)


def test_lone_trip_expires():
    p = TripPairer(CFG)
    assert p.push(BeamTrip(A, 0)) is None
    p.expire(1000)
    assert p.dropped == 1 and p.pending == []
    assert p.push(BeamTrip(B, 1100)) is None


@st.composite
def single_file(draw):
    """Trips of people crossing one at a time at admissible speeds."""
    t, trips, truth = 0, [], []
    for _ in range(draw(st.integers(0, 3))):
        t += draw(st.integers(0, 2000))
        gap = draw(st.integers(100, 300))
        enter = draw(st.booleans())
        first, second = (A, B) if enter else (B, A)
        trips += [BeamTrip(first, t), BeamTrip(second, t + gap)]
        truth.append(Direction.ENTER if enter else Direction.EXIT)
        t += gap + CFG.debounce_ms
    return trips, truth


@settings(max_examples=300)
@given(single_file())
def test_single_file_pairing_matches_truth_and_oracle(case):
    trips, truth = case
    got = list(pair_trips(trips, CFG))
    assert [c.direction for c in got] == truth
    assert len(got) == max_matching(trips)


@st.composite
def any_trips(draw):
    ts = sorted(draw(st.lists(st.integers(0, 1500), max_size=6)))
    trips, last = [], {}
    for t in ts:
        s = draw(st.sampled_from([A, B]))
        # same-sensor trips are debounced upstream
        if s in last and t - last[s] < CFG.debounce_ms:
            continue
        last[s] = t
        trips.append(BeamTrip(s, t))
    return trips


@settings(max_examples=300)
@given(any_trips())
def test_pairing_bounds(trips):
    got = list(pair_trips(trips, CFG))
    n_a = sum(t.sensor is A for t in trips)
    assert len(got) <= min(n_a, len(trips) - n_a)
    assert len(got) <= max_matching(trips)
    used = []
    for c in got:
        assert c.first.sensor != c.second.sensor
        assert c.direction is not Direction.UNKNOWN
        used += [c.first, c.second]
    assert len(used) == len(set(used))


# -- full detector ---------------------------------------------------------------------


def crossing_samples(t0, speed, enter=True, spacing=0.30):
    gap = round(spacing / speed * 1000)
    occl = max(60, round(0.25 / speed * 1000))
    first, second = (A, B) if enter else (B, A)
    return sorted([
        (t0, first, 400), (t0 + occl, first, 1500),
        (t0 + gap, second, 400), (t0 + gap + occl, second, 1500),
    ], key=lambda s: s[0])


@pytest.mark.parametrize("speed, expected", [(1.0, Direction.ENTER), (2.0, Direction.ENTER),
                                             (3.0, Direction.ENTER), (0.5, None), (4.0, None)])
def test_detector_speed_envelope(speed, expected):
    det = DoorDetector()
    got = [c for ts, s, mm in crossing_samples(1000, speed) if (c := det.feed(s, mm, ts))]
    if expected is None:
        assert got == []
    else:
        assert [c.direction for c in got] == [expected]


def test_detector_exit():
    det = DoorDetector()
    got = [c for ts, s, mm in crossing_samples(0, 1.5, enter=False) if (c := det.feed(s, mm, ts))]
    assert [c.direction for c in got] == [Direction.EXIT]


def test_detector_unknown_count():
    det = DoorDetector()
    for ts, s, mm in crossing_samples(0, 0.5):
        det.feed(s, mm, ts)
    det.flush()
    assert det.unknown == 2
