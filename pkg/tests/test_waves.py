import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roadtraj.macrofield import FTPS_TO_MPH, edie_field
from roadtraj.synth import (CorruptionSpec, PlantedWave, ScenarioSpec, corrupt, generate_scenario,
                            speed_field)
from roadtraj.waves import (InsufficientDataError, NoDominantPeriod, NoWaveDetected, WaveError,
                            cross_correlation, cwt_morlet, dominant_period, extract_speed_series,
                            morlet, period_to_scale, scale_grid, wave_lag, wave_properties,
                            wave_speed_crosscorr, wave_speed_distribution)

GRID_STEP = (1200 / 30) ** (1 / 63)     # ratio between neighbouring default periods


def bump_train(t, period=200.0):
    return 60.0 - 25.0 * np.maximum(0.0, np.cos(2 * np.pi * t / period)) ** 2


@pytest.fixture(scope="module")
def wave_scenario():
    c = 12.8 / FTPS_TO_MPH
    spec = ScenarioSpec(x_end=6000, duration=900, n_lanes=3, inflow=1.0, drain=False,
                        waves=(PlantedWave(35.0, c, ((0.0, 150.0),)),), seed=12)
    ds = generate_scenario(spec)
    return spec, ds, edie_field(ds, 100, 5, t_range=(0, 900))


# -- series ------------------------------------------------------------------------

def test_constant_speed_series():
    ds = generate_scenario(ScenarioSpec(x_end=3000, duration=300, inflow=0.8, seed=1))
    s = extract_speed_series(ds, 1550.0, t_range=(0, 300))
    np.testing.assert_allclose(s.v, 100.0, atol=1e-6)


def test_planted_series_follows_field(wave_scenario):
    spec, _, fld = wave_scenario
    s = extract_speed_series(fld, 3050.0)
    v = speed_field(spec)
    analytic = v(3050.0, s.t)
    assert np.corrcoef(analytic[10:], s.v[10:])[0, 1] > 0.95
    f = np.fft.rfftfreq(len(s.v), s.dt)
    peak = f[1:][np.argmax(np.abs(np.fft.rfft(s.v - s.v.mean()))[1:])]
    assert 1 / peak == pytest.approx(150.0, rel=0.05)


def test_band_column_insufficient(small_scenario):
    _, ds = small_scenario
    fs = corrupt(ds, CorruptionSpec(({"type": "missing_pole", "x": [1200, 1400]},)))
    with pytest.raises(InsufficientDataError):
        extract_speed_series(fs.to_dataset(), 1250.0, max_gap=0.1)


# -- cross-correlation ----------------------------------------------------------------

def test_constructed_delay():
    t = np.arange(0, 1800, 1.0)
    a, b = bump_train(t), bump_train(t - 55.4)
    assert wave_lag(a, b, 1.0) == pytest.approx(55.4, abs=0.05)
    assert wave_speed_crosscorr(a, b, 1056.0, dt=1.0) == pytest.approx(13.0, abs=0.02)


def test_identical_series_no_wave():
    a = bump_train(np.arange(0, 1800, 1.0))
    with pytest.raises(NoWaveDetected):
        wave_speed_crosscorr(a, a.copy(), 1000.0, dt=1.0, max_lag_s=60.0)
    with pytest.raises(NoWaveDetected):
        wave_lag(np.full(100, 3.0), a[:100], 1.0)
    with pytest.raises(WaveError):
        wave_speed_crosscorr(a, a, 0.0, dt=1.0)


def test_correlation_lag_zero_is_one():
    a = bump_train(np.arange(0, 600, 1.0))
    lags, r = cross_correlation(a, a, 10)
    assert r[lags == 0][0] == pytest.approx(1.0)


@given(st.floats(0.1, 50), st.floats(-100, 100), st.floats(0.1, 50), st.floats(-100, 100),
       st.floats(20, 90))
def test_affine_invariance_and_symmetry(s1, o1, s2, o2, delay):
    t = np.arange(0, 1800, 1.0)
    a, b = bump_train(t), bump_train(t - delay)
    base = wave_lag(a, b, 1.0)
    assert wave_lag(s1 * a + o1, s2 * b + o2, 1.0) == pytest.approx(base, abs=1e-6)
    assert wave_lag(b, a, 1.0) == pytest.approx(-base, abs=1e-6)


def test_distribution_recovers_planted_speed(wave_scenario):
    _, _, fld = wave_scenario
    res = wave_speed_distribution(fld, n_pairs=20, seed=7)
    assert res.mean == pytest.approx(12.8, rel=0.05)
    assert res.std >= 0 and len(res.speeds) + res.dropped == 20


def test_distribution_errors():
    ds = generate_scenario(ScenarioSpec(x_end=3000, duration=400, inflow=0.8, seed=1))
    fld = edie_field(ds, 100, 5, t_range=(0, 400))
    with pytest.raises(NoWaveDetected):
        wave_speed_distribution(fld, n_pairs=5)
    with pytest.raises(WaveError):
        wave_speed_distribution(fld, n_pairs=1)


# -- wavelets ------------------------------------------------------------------------

def test_morlet_at_zero():
    assert morlet(0.0) == 1.0


def test_zero_series_zero_power():
    sg = cwt_morlet(np.zeros(200), scale_grid(), dt=5.0)
    assert np.all(sg.power[sg.resolved] == 0)


def test_unresolved_scales_flagged():
    sg = cwt_morlet(np.random.default_rng(0).normal(size=100), [1.0, 5.0, 50.0], dt=5.0)
    assert list(sg.resolved) == [False, False, True]
    assert not sg.valid[0].any() and np.all(np.isnan(sg.coef[0]))


def oversampled_coef(f, a, b, dt, n, factor=10):
    # continuous-signal integral at 10x finer spacing, central window only
    h = dt / factor
    t = np.arange(0, n * dt, h)
    return np.array([np.sum(f(t) * morlet((t - bb) / a)) * h / np.sqrt(a) for bb in b])


def test_cwt_matches_oversampled_integral():
    T, dt, n = 400.0, 5.0, 720

    def f(t):
        return np.cos(2 * np.pi * t / T)

    x = f(dt * np.arange(n))
    scales = scale_grid()
    sg = cwt_morlet(x, scales, dt=dt)
    b = dt * np.arange(200, 520, 40)
    for i in (20, 40, 50):
        ref = oversampled_coef(f, scales[i], b, dt, n)
        got = sg.coef[i, 200:520:40]
        assert np.max(np.abs(got - ref)) < 1e-3 * np.abs(ref).max() + 1e-6


@pytest.mark.parametrize("T", [126.0, 402.0, 250.0])
def test_cosine_power_peak(T):
    dt = 5.0
    x = np.cos(2 * np.pi * dt * np.arange(1440) / T)
    sg = cwt_morlet(x, scale_grid(), dt=dt)
    found = dominant_period(sg) * 60.0
    assert max(found / T, T / found) <= GRID_STEP + 1e-9
    # the oversampled integral oracle picks the same scale
    scales = scale_grid()
    b = dt * np.arange(400, 1040, 20)
    ref_power = [np.mean(oversampled_coef(lambda t: np.cos(2 * np.pi * t / T), a, b, dt, 1440) ** 2)
                 for a in scales]
    got_power = np.nanmean(sg.power[:, 400:1040:20], axis=1)
    assert int(np.argmax(ref_power)) == int(np.argmax(np.nan_to_num(got_power)))


@settings(max_examples=20)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 1000))
def test_cwt_linearity(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=300), rng.normal(size=300)
    sc = scale_grid("log:12")
    cx, cy = cwt_morlet(x, sc, 5.0).coef, cwt_morlet(y, sc, 5.0).coef
    cz = cwt_morlet(alpha * x + beta * y, sc, 5.0).coef
    np.testing.assert_allclose(cz, alpha * cx + beta * cy, atol=1e-9, equal_nan=True)


def test_cwt_shift_covariance():
    rng = np.random.default_rng(4)
    x = rng.normal(size=600)
    k = 17
    shifted = np.r_[np.zeros(k), x[:-k]]
    sc = scale_grid("log:10", 30, 200)
    # match the mean each transform subtracts so only the delay differs
    a = cwt_morlet(x - x.mean(), sc, 5.0)
    b = cwt_morlet(shifted - x.mean() * (len(x) - k) / len(x), sc, 5.0)
    inner = slice(150, 400)
    np.testing.assert_allclose(b.coef[:, inner.start + k:inner.stop + k], a.coef[:, inner],
                               atol=0.05 * np.nanmax(np.abs(a.coef)))


def test_dominant_period_sinusoid_and_noise():
    dt = 5.0
    t = dt * np.arange(1440)
    sg = cwt_morlet(np.sin(2 * np.pi * t / (6.7 * 60)), scale_grid(), dt=dt)
    p = dominant_period(sg)
    assert max(p / 6.7, 6.7 / p) <= GRID_STEP + 1e-9
    noise = np.random.default_rng(7).normal(size=20000)
    with pytest.raises(NoDominantPeriod):
        dominant_period(cwt_morlet(noise, scale_grid(), dt=dt))
    with pytest.raises(WaveError):
        dominant_period(sg, (0, 1e9))


def test_period_scale_conversion():
    assert period_to_scale(2 * np.pi) == pytest.approx(5.0)
    assert scale_grid("lin:3", 60, 120) * 2 * np.pi / 5 == pytest.approx([60, 90, 120])


def test_planted_period_in_scenario(wave_scenario):
    _, _, fld = wave_scenario
    props = wave_properties(fld, 3050.0, (0, 900), n_pairs=10, seed=1)
    assert max(props.period_min / 2.5, 2.5 / props.period_min) <= GRID_STEP + 1e-9
    assert props.speed_mean == pytest.approx(12.8, rel=0.05)
    assert props.fluctuation_mph > 10
