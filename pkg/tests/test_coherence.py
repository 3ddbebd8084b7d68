import math

import numpy as np
import pytest

from holespin.analysis import fit_stretched_exp
from holespin.coherence import (
    DecayCurve,
    EngineRejection,
    NoiseEnvironment,
    echo_with_nuclear_precession,
    ff_visibility,
    mc_visibility,
)
from holespin.noise import OrnsteinUhlenbeck, QuasiStaticGaussian, SpectralGaussian, Telegraph
from holespin.sequences import PulseModel, SequenceSpec
from holespin.spin import QDParameters, Species

P = QDParameters()


def _ou_chi(sigma, tau_c, tau, echo):
    x = tau / tau_c
    if echo:
        return sigma**2 * tau_c**2 * (x - 3 + 4 * np.exp(-x / 2) - np.exp(-x))
    return sigma**2 * tau_c**2 * (x - 1 + np.exp(-x))


def test_ff_quasi_static_ramsey_and_hahn():
    s = 2 * np.pi * 5e6
    tau = np.geomspace(1e-8, 1e-6, 25)
    noise = QuasiStaticGaussian(s)
    ramsey = ff_visibility(SequenceSpec.ramsey(), noise, tau)
    np.testing.assert_allclose(ramsey.visibility, np.exp(-(s**2) * tau**2 / 2), rtol=1e-6, atol=1e-12)
    hahn = ff_visibility(SequenceSpec.hahn(), noise, tau)
    np.testing.assert_allclose(hahn.visibility, 1.0, atol=1e-9)


@pytest.mark.parametrize("echo", [False, True])
def test_ff_ou_closed_form(echo):
    tau_c, sigma = 1e-6, 0.5e6
    tau = np.geomspace(0.1, 10, 20) * tau_c
    seq = SequenceSpec.hahn() if echo else SequenceSpec.ramsey()
    curve = ff_visibility(seq, OrnsteinUhlenbeck(sigma, tau_c), tau)
    chi = -np.log(curve.visibility)
    np.testing.assert_allclose(chi, _ou_chi(sigma, tau_c, tau, echo), rtol=0.01)


def test_ff_chi_linear_in_power():
    tau = np.geomspace(1e-7, 1e-5, 10)
    noise = SpectralGaussian(0.56, 1e10)
    base = -np.log(ff_visibility(SequenceSpec.cp(4), noise, tau).visibility)
    triple = -np.log(ff_visibility(SequenceSpec.cp(4), noise.scaled(3.0), tau).visibility)
    np.testing.assert_allclose(triple, 3 * base, rtol=1e-9)


def test_no_noise_full_visibility():
    tau = np.geomspace(1e-8, 1e-6, 5)
    curve = mc_visibility(SequenceSpec.hahn(), NoiseEnvironment(), P, 5.0, tau, n_traj=200, seed=1)
    np.testing.assert_allclose(curve.visibility, 1.0, atol=1e-12)
    ff = ff_visibility(SequenceSpec.hahn(), NoiseEnvironment(), tau, P, 5.0)
    np.testing.assert_allclose(ff.visibility, 1.0)


def test_mc_independent_of_worker_count():
    env = NoiseEnvironment(detuning=OrnsteinUhlenbeck(2e6, 1e-6))
    tau = np.geomspace(1e-7, 4e-6, 8)
    a = mc_visibility(SequenceSpec.hahn(), env, P, 1.0, tau, n_traj=3000, seed=11, n_workers=1)
    b = mc_visibility(SequenceSpec.hahn(), env, P, 1.0, tau, n_traj=3000, seed=11, n_workers=2)
    np.testing.assert_array_equal(a.visibility, b.visibility)
    np.testing.assert_array_equal(a.stderr, b.stderr)
    c = mc_visibility(SequenceSpec.hahn(), env, P, 1.0, tau, n_traj=3000, seed=12)
    assert not np.array_equal(a.visibility, c.visibility)


def test_mc_step_convergence():
    env = NoiseEnvironment(detuning=OrnsteinUhlenbeck(1e6, 1e-6))
    tau = np.geomspace(2e-7, 3e-6, 6)
    coarse = mc_visibility(SequenceSpec.hahn(), env, P, 1.0, tau, n_traj=8000, seed=3, dt=1e-8)
    fine = mc_visibility(SequenceSpec.hahn(), env, P, 1.0, tau, n_traj=8000, seed=3, dt=5e-9)
    noise = 3 * np.hypot(coarse.stderr, fine.stderr)
    assert np.all(np.abs(coarse.visibility - fine.visibility) < 0.005 * fine.visibility + noise)
    with pytest.raises(ValueError):
        mc_visibility(SequenceSpec.hahn(), env, P, 1.0, tau, n_traj=200, seed=3, dt=1e-7)


def test_mc_visibility_bounded():
    env = NoiseEnvironment(detuning=Telegraph(3e6, 1e5, 1e5))
    tau = np.geomspace(1e-8, 2e-6, 12)
    curve = mc_visibility(SequenceSpec.ramsey(), env, P, 1.0, tau, n_traj=1000, seed=5)
    assert np.all(curve.visibility >= 0)
    assert np.all(curve.visibility <= 1 + 3 * curve.stderr + 1e-12)


def test_engine_rejections():
    tau = np.geomspace(1e-8, 1e-6, 5)
    with pytest.raises(EngineRejection):
        ff_visibility(SequenceSpec.ramsey(), NoiseEnvironment(nuclear_z=QuasiStaticGaussian(8e-4)), tau, P, 1.0)
    with pytest.raises(EngineRejection):
        ff_visibility(SequenceSpec.cp(2, PulseModel(mode="rotation", angle_error=0.05)), QuasiStaticGaussian(1e6), tau)
    telegraph = Telegraph(1e6, 1e5, 1e5)
    with pytest.raises(EngineRejection):
        ff_visibility(SequenceSpec.hahn(), telegraph, tau)
    approx = ff_visibility(SequenceSpec.hahn(), telegraph, tau, gaussian_approximation=True)
    assert np.all((approx.visibility > 0) & (approx.visibility <= 1))


def test_decay_curve_round_trip(tmp_path):
    curve = DecayCurve([1e-9, 2e-9, 5e-9], [1.0, 0.5, 0.1], [0.0, 0.01, 0.02], {"engine": "mc", "seed": 4})
    path = tmp_path / "c.csv"
    curve.save(path)
    back = DecayCurve.load(path)
    np.testing.assert_array_equal(back.delays, curve.delays)
    np.testing.assert_array_equal(back.visibility, curve.visibility)
    np.testing.assert_array_equal(back.stderr, curve.stderr)
    assert back.metadata == curve.metadata
    assert path.read_text().splitlines()[0] == "tau_s,visibility,stderr"
    with pytest.raises(ValueError):
        DecayCurve([2e-9, 1e-9], [1, 1], [0, 0])
    with pytest.raises(ValueError):
        DecayCurve([1e-9, 2e-9], [1, 1], [0, -1])


def test_hahn_refocuses_slow_telegraph():
    # switching much slower than the delays: the echo cancels the frozen offset
    env = NoiseEnvironment(detuning=Telegraph(2 * np.pi * 5e6, 1e3, 1e3))
    tau = np.linspace(5e-8, 5e-7, 10)
    ramsey = mc_visibility(SequenceSpec.ramsey(), env, P, 1.0, tau, n_traj=2000, seed=2)
    hahn = mc_visibility(SequenceSpec.hahn(), env, P, 1.0, tau, n_traj=2000, seed=2)
    # two-level offset: |cos| up to level-occupation imbalance ~ 1/sqrt(n_traj)
    np.testing.assert_allclose(ramsey.visibility, np.abs(np.cos(2 * np.pi * 5e6 * tau)), atol=0.03)
    assert np.all(hahn.visibility > 0.99)


def test_electrical_field_scaling_collapse():
    # chi ~ B**2 tau**(1 + lambda) for power-law noise
    lam = 0.56
    env = NoiseEnvironment(electrical=SpectralGaussian(lam, 6.65, 1e3, 1e10))
    tau = np.geomspace(3e-7, 3e-6, 12)
    stretch = 2 ** (-2 / (1 + lam))
    low = ff_visibility(SequenceSpec.hahn(), env, tau, P, 2.0)
    high = ff_visibility(SequenceSpec.hahn(), env, tau * stretch, P, 4.0)
    np.testing.assert_allclose(high.visibility, low.visibility, rtol=1e-3)


@pytest.mark.parametrize("lam", [0.3, 0.56, 0.8])
def test_stretch_exponent_tracks_noise_exponent(lam):
    unit = SpectralGaussian(lam, 1.0)
    chi_1us = -np.log(ff_visibility(SequenceSpec.hahn(), unit, [1e-6]).visibility[0])
    noise = unit.scaled(1 / chi_1us)
    tau = np.geomspace(1e-7, 1e-4, 80)
    curve = ff_visibility(SequenceSpec.hahn(), noise, tau)
    keep = (curve.visibility > 0.02) & (curve.visibility < 0.98)
    fit = fit_stretched_exp(DecayCurve(tau[keep], curve.visibility[keep], np.zeros(keep.sum())))
    assert fit["alpha"] == pytest.approx(1 + lam, abs=0.05)


def test_echo_precession_static_limit():
    params = QDParameters(species=(Species("In-115", 9.33e6, 0.3e-3),))
    tau = np.linspace(1e-8, 2e-7, 10)
    # Larmor period of ~0.1 ms at 1 mT: the transverse field is frozen and refocused
    curve = echo_with_nuclear_precession(params, 1e-3, tau, n_traj=500, seed=1)
    assert np.all(curve.visibility > 0.99)
    with pytest.raises(ValueError):
        echo_with_nuclear_precession(params, 0.0, tau, n_traj=500, seed=1)
