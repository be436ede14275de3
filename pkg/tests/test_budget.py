import numpy as np
import pytest

from spikebudget.budget import (
    BudgetConfig,
    BudgetControllerState,
    budget_penalty,
    controller_update,
    spike_rate,
)


# ---------------------------------------------------------------------------
# spike_rate


def test_spike_rate_extremes():
    assert spike_rate(np.zeros((5, 2, 4), dtype=np.uint8)) == 0.0
    assert spike_rate(np.ones((5, 2, 4), dtype=np.uint8)) == 1.0


def test_spike_rate_known_count():
    # N=4, T=5, B=1: 6 spikes out of 20 cells
    s = np.zeros((5, 1, 4), dtype=np.uint8)
    s.reshape(-1)[:6] = 1
    assert spike_rate(s) == pytest.approx(0.30)


def test_spike_rate_rejects_empty():
    with pytest.raises(ValueError):
        spike_rate(np.zeros((0, 2, 4)))


def test_spike_rate_matches_loop_count():
    rng = np.random.default_rng(1)
    s = (rng.random((7, 3, 5)) < 0.3).astype(np.uint8)
    count = sum(int(v) for v in s.reshape(-1))
    assert spike_rate(s) == pytest.approx(count / s.size)


# ---------------------------------------------------------------------------
# budget_penalty


def test_penalty_zero_at_target():
    p, d = budget_penalty(0.1, 0.1, 3.0)
    assert p == 0.0 and d == 0.0


def test_penalty_closed_form_above():
    p, d = budget_penalty(0.2, 0.1, 2.0)
    assert p == pytest.approx(0.02)
    assert d == pytest.approx(0.4)


def test_penalty_closed_form_below_negative_derivative():
    # below target the gradient encourages MORE activity
    p, d = budget_penalty(0.05, 0.1, 2.0)
    assert d == pytest.approx(-0.2)
    assert p == pytest.approx(2.0 * 0.05**2)


def test_penalty_derivative_sign_property():
    rng = np.random.default_rng(2)
    for _ in range(200):
        r = float(rng.random())
        t = float(rng.uniform(0.01, 0.99))
        lam = float(rng.uniform(0.01, 5.0))
        _, d = budget_penalty(r, t, lam)
        assert np.sign(d) == np.sign(r - t)


def test_penalty_derivative_is_fd_of_penalty():
    h = 1e-7
    for r, t, lam in [(0.3, 0.1, 2.5), (0.02, 0.1, 1.0), (0.5, 0.5, 4.0)]:
        p_plus, _ = budget_penalty(r + h, t, lam)
        p_minus, _ = budget_penalty(r - h, t, lam)
        _, d = budget_penalty(r, t, lam)
        assert abs((p_plus - p_minus) / (2 * h) - d) < 1e-6


# ---------------------------------------------------------------------------
# controller_update


def test_controller_known_step():
    cfg = BudgetConfig(r_target=0.10, eta=0.2, window=5)
    st = BudgetControllerState.init(cfg)
    st.lambda_rate = 0.5
    # fill the window so its mean is 0.15
    for r in (0.15, 0.15, 0.15, 0.15):
        st.rate_window.append(r)
    controller_update(st, cfg, 0.15)
    assert st.lambda_rate == pytest.approx(0.51)


def test_controller_clips_at_lower_bound():
    cfg = BudgetConfig(r_target=0.10, eta=0.2)
    st = BudgetControllerState.init(cfg)
    controller_update(st, cfg, 0.02)
    assert st.lambda_rate == 0.0


def test_controller_fixed_point_at_target():
    cfg = BudgetConfig(r_target=0.10, eta=0.2)
    st = BudgetControllerState.init(cfg)
    st.lambda_rate = 1.23
    for _ in range(20):
        controller_update(st, cfg, 0.10)
        assert st.lambda_rate == pytest.approx(1.23)


def test_controller_never_leaves_bounds():
    cfg = BudgetConfig(r_target=0.3, eta=1.5, lambda_min=0.0, lambda_max=5.0)
    st = BudgetControllerState.init(cfg)
    rng = np.random.default_rng(3)
    for _ in range(5000):
        controller_update(st, cfg, float(rng.random()))
        assert 0.0 <= st.lambda_rate <= 5.0


def test_controller_monotone_in_rate():
    cfg = BudgetConfig(r_target=0.10, eta=0.2)
    rng = np.random.default_rng(4)
    history = [float(r) for r in rng.random(4)]
    lam_prev = None
    for r in np.linspace(0, 1, 21):
        st = BudgetControllerState.init(cfg)
        st.lambda_rate = 2.0
        for h in history:
            st.rate_window.append(h)
        controller_update(st, cfg, float(r))
        if lam_prev is not None:
            assert st.lambda_rate >= lam_prev
        lam_prev = st.lambda_rate


def test_controller_window_length_respected():
    cfg = BudgetConfig(window=3)
    st = BudgetControllerState.init(cfg)
    for r in (0.1, 0.2, 0.3, 0.4):
        st.rate_window.append(r)
    assert list(st.rate_window) == [0.2, 0.3, 0.4]
    assert st.windowed_rate() == pytest.approx(0.3)


def test_controller_rejects_out_of_range_rate():
    cfg = BudgetConfig()
    st = BudgetControllerState.init(cfg)
    with pytest.raises(ValueError):
        controller_update(st, cfg, 1.5)


def test_closed_loop_convergence_synthetic_plant():
    # plant: spike rate falls linearly as lambda rises, plus noise.
    # r(lam) = r_free - slope*lam; target sits between r_free and the
    # clipped minimum, so the controller must settle |r_bar - t| <= 0.01.
    cfg = BudgetConfig(r_target=0.10, eta=0.2, window=5)
    st = BudgetControllerState.init(cfg)
    rng = np.random.default_rng(5)
    r_free, slope = 0.30, 0.08
    r_bar = r_free
    for step in range(500):
        r = r_free - slope * st.lambda_rate + float(rng.normal(0, 0.003))
        r = min(max(r, 0.0), 1.0)
        controller_update(st, cfg, r)
        r_bar = st.windowed_rate()
    assert abs(r_bar - cfg.r_target) <= 0.01
    assert 0.0 <= st.lambda_rate <= 5.0


def test_config_validation():
    with pytest.raises(ValueError):
        BudgetConfig(r_target=0.0)
    with pytest.raises(ValueError):
        BudgetConfig(eta=0.0)
    with pytest.raises(ValueError):
        BudgetConfig(lambda_min=2.0, lambda_max=1.0)
    with pytest.raises(ValueError):
        BudgetConfig(window=0)
