import numpy as np
import pytest

from aoifusion import SPEED_OF_LIGHT
from aoifusion.ranging import (DegenerateExchangeError, TwrExchange, range_from_tof, single_sided_tof,
                               time_of_flight)


def test_symmetric_ideal_exchange_returns_true_tof():
    T, D = 33e-9, 200e-6
    x = TwrExchange(Ra=2 * T + D, Rb=2 * T + D, Da=D, Db=D)
    assert time_of_flight(x) == pytest.approx(T, rel=1e-9)


def test_equal_delays_give_zero_flight():
    assert time_of_flight(TwrExchange(1e-6, 1e-6, 1e-6, 1e-6)) == 0.0


def test_worked_example():
    # (3e-6 * 3.2e-6 - 1e-6 * 1.1e-6) / (2 * (3e-6 + 1e-6))
    x = TwrExchange(Ra=3e-6, Rb=3.2e-6, Da=1e-6, Db=1.1e-6)
    assert time_of_flight(x) == pytest.approx(1.0625e-6, rel=1e-12)
    assert range_from_tof(time_of_flight(x)) == pytest.approx(318.53, abs=0.01)


def test_range_conversion():
    assert range_from_tof(0.0) == 0.0
    assert range_from_tof(1e-8) == pytest.approx(2.99792458, rel=1e-12)
    assert range_from_tof(2.0, c=3.0) == 6.0
    with pytest.raises(ValueError):
        range_from_tof(-1e-9)


def test_negative_or_invalid_exchanges_are_rejected():
    with pytest.raises(DegenerateExchangeError):
        TwrExchange(0.0, 1e-6, 1e-6, 1e-6)
    with pytest.raises(DegenerateExchangeError):
        time_of_flight(TwrExchange(Ra=1e-6, Rb=1e-6, Da=2e-6, Db=2e-6))


def test_ideal_constructor_matches_definition():
    x = TwrExchange.ideal(50e-9, 300e-6, 280e-6)
    assert time_of_flight(x) == pytest.approx(50e-9, rel=1e-6)


def test_asymmetric_reply_error_beats_single_sided():
    """A reply-delay mismatch delta barely moves the double-sided estimate."""
    T, D = 100e-9, 250e-6
    for delta in np.linspace(1e-6, 50e-6, 12):
        Da, Db = D + delta, D
        x = TwrExchange(Ra=2 * T + Db, Rb=2 * T + Da, Da=Da, Db=Db)
        err_ds = abs(time_of_flight(x) - T)
        # single-sided A->B->A with B's reply delay mistaken for A's
        err_ss = abs(single_sided_tof(2 * T + Db, Da) - T)
        assert err_ds < err_ss
        assert err_ds <= 2 * T * delta / (2 * T + D) + 1e-18
        assert range_from_tof(err_ds) < 1e-3 * SPEED_OF_LIGHT * err_ss
