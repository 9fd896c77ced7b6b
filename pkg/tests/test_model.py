import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfpf import model as m
from mfpf.errors import ConfigError, NumericalError
from mfpf.model import (
    MeasurementIncrementPath,
    ModelSpec,
    NoiseBank,
    ZeroNoise,
    euler_maruyama_step,
    get_preset,
    read_path_csv,
    simulate_truth,
    write_path_csv,
)


def scalar_model(a=-0.2, b=0.2, c=1.01, q=0.0, R=1e-4):
    return ModelSpec(
        1, 1, 1, 0,
        drift=lambda X, th: a * X + b,
        diffusion=lambda X: np.array([[np.sqrt(q)]]),
        sensor=lambda X, th: c * X,
        obs_cov=np.array([[R]]),
    )


def test_zero_drift_and_diffusion_is_identity():
    mdl = ModelSpec(1, 1, 1, 0, lambda X, th: 0 * X, lambda X: np.zeros((1, 1)), lambda X, th: X, [[1.0]])
    assert euler_maruyama_step(np.array([1.0]), mdl, None, 0.02, [0.0])[0] == 1.0


def test_step_drift_only():
    p = get_preset("scalar_lg")
    x = euler_maruyama_step(np.array([0.0]), p.model, p.params, 0.02, [0.0])
    assert x[0] == pytest.approx(0.004, abs=1e-15)


def test_step_with_diffusion():
    p = get_preset("scalar_lg")
    x = euler_maruyama_step(np.array([0.0]), p.model, p.params, 0.02, [0.1])
    assert x[0] == pytest.approx(0.004 + np.sqrt(0.001) * 0.1, abs=1e-15)
    assert x[0] == pytest.approx(0.0071623, abs=1e-7)


def test_step_ensemble_matches_single():
    p = get_preset("scalar_lg")
    X = np.array([[0.0], [0.5], [-1.0]])
    dW = np.array([[0.1], [-0.2], [0.0]])
    batch = euler_maruyama_step(X, p.model, p.params, 0.02, dW)
    for i in range(3):
        assert np.array_equal(batch[i], euler_maruyama_step(X[i], p.model, p.params, 0.02, dW[i]))


def test_step_nonfinite_raises_with_index():
    mdl = scalar_model(a=1e308, b=0.0)
    with pytest.raises(NumericalError) as exc, np.errstate(over="ignore", invalid="ignore"):
        euler_maruyama_step(np.array([1e10]), mdl, None, 1.0, [0.0], step=17)
    assert exc.value.step == 17
    assert "17" in str(exc.value)


def test_step_rejects_bad_dt():
    with pytest.raises(ConfigError):
        euler_maruyama_step(np.array([0.0]), scalar_model(), None, 0.0, [0.0])


def test_obs_cov_must_be_spd():
    with pytest.raises(ConfigError):
        scalar_model(R=0.0)
    with pytest.raises(ConfigError):
        ModelSpec(1, 2, 1, 0, lambda X, th: X, lambda X: np.ones((1, 1)), lambda X, th: np.hstack([X, X]),
                  [[1.0, 2.0], [0.0, 1.0]])


def test_dimension_checks():
    with pytest.raises(ConfigError):
        ModelSpec(0, 1, 1, 0, None, None, None, [[1.0]])
    p = get_preset("scalar_lg")
    with pytest.raises(ConfigError):
        simulate_truth(p.model, p.params, np.zeros(2), 10, 0.02)
    with pytest.raises(ConfigError):
        simulate_truth(p.model, p.params, np.zeros(1), 0, 0.02)


def test_preset_dimensions():
    p = get_preset("scalar_lg")
    X = np.linspace(-1, 1, 7)[:, None]
    assert p.model.f(X, p.params).shape == (7, 1)
    assert p.model.h(X, p.params).shape == (7, 1)
    assert p.model.g(X).shape == (7, 1, 1)
    per_particle = np.tile(p.params, (7, 1))
    assert np.array_equal(p.model.f(X, per_particle), p.model.f(X, p.params))
    with pytest.raises(ConfigError):
        get_preset("nope")


def test_truth_deterministic():
    p = get_preset("scalar_lg")
    s1, p1 = simulate_truth(p.model, p.params, [0.01], 200, 0.02, rng=5)
    s2, p2 = simulate_truth(p.model, p.params, [0.01], 200, 0.02, rng=5)
    s3, _ = simulate_truth(p.model, p.params, [0.01], 200, 0.02, rng=6)
    assert np.array_equal(s1, s2) and np.array_equal(p1.increments, p2.increments)
    assert not np.array_equal(s1, s3)
    assert s1.shape == (201, 1) and len(p1) == 200
    assert p1.times[-1] == pytest.approx(4.0)


def test_zero_noise_increments_are_exact():
    p = get_preset("scalar_lg")
    states, path = simulate_truth(p.model, p.params, [0.3], 100, 0.02, rng=ZeroNoise())
    resid = path.increments[:, 0] / 0.02 - 1.01 * states[:-1, 0]
    assert np.max(np.abs(resid)) < 1e-12


def test_zero_noise_converges_to_fixed_point():
    p = get_preset("scalar_lg")
    states, _ = simulate_truth(p.model, p.params, [0.0], 5000, 0.02, rng=ZeroNoise())
    assert abs(states[-1, 0] - 1.0) < 1e-6


def test_x0_sampling_statistics():
    p = get_preset("scalar_lg")
    x = p.sample_x0(3, 20000)[:, 0]
    assert abs(x.mean()) < 4 * np.sqrt(0.001 / 20000)
    assert x.var() == pytest.approx(0.001, rel=0.05)


def test_rng_streams_reproducible_and_distinct():
    a = m.RngStream(1, 7).generator().standard_normal(5)
    b = m.RngStream(1, 7).generator().standard_normal(5)
    c = m.RngStream(1, 8).generator().standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_noise_bank_particle_count_does_not_reshuffle():
    small = NoiseBank(4)
    big = NoiseBank(4)
    s = np.vstack([small.normal(m.PROCESS, 10, 2) for _ in range(300)])
    b = np.vstack([big.normal(m.PROCESS, 25, 2)[:10] for _ in range(300)])
    assert np.array_equal(s, b)


def test_noise_bank_sources_independent():
    nb = NoiseBank(0)
    x = nb.normal(m.PROCESS, 2000, 1)[:, 0]
    y = nb.normal(m.INNOVATION, 2000, 1)[:, 0]
    assert abs(np.corrcoef(x, y)[0, 1]) < 0.1
    assert abs(x.std() - 1.0) < 0.05


def test_noise_bank_growing_ensemble_stays_aligned():
    nb = NoiseBank(2)
    nb.normal(m.PROCESS, 3, 1)
    draw = nb.normal(m.PROCESS, 5, 1)
    assert draw.shape == (5, 1)
    assert np.all(np.isfinite(draw))


def test_increment_path_validation():
    with pytest.raises(ConfigError):
        MeasurementIncrementPath(0.0, 0.0, np.zeros(3))
    path = MeasurementIncrementPath(1.0, 0.5, np.arange(4.0))
    assert path.obs_dim == 1 and len(path) == 4
    assert np.allclose(path.times, [1.0, 1.5, 2.0, 2.5, 3.0])


def test_path_csv_roundtrip(tmp_path):
    p = get_preset("scalar_lg")
    states, path = simulate_truth(p.model, p.params, [0.0], 30, 0.02, rng=1)
    fname = tmp_path / "truth.csv"
    write_path_csv(fname, states, path)
    header = fname.read_text().splitlines()[0]
    assert header == "t,x_1,dy_1"
    s2, p2 = read_path_csv(fname)
    assert np.array_equal(states, s2)
    assert np.array_equal(path.increments, p2.increments)
    assert p2.dt == pytest.approx(0.02)


@settings(max_examples=40, deadline=None)
@given(
    x=st.floats(-5, 5),
    dw=st.floats(-1, 1),
    dt=st.floats(1e-4, 0.5),
)
def test_step_is_direct_formula(x, dw, dt):
    p = get_preset("scalar_lg")
    got = euler_maruyama_step(np.array([x]), p.model, p.params, dt, [dw])[0]
    want = x + (-0.2 * x + 0.2) * dt + np.sqrt(0.001) * dw
    assert got == pytest.approx(want, rel=1e-12, abs=1e-15)
