"""Alternative double-sided two-way ranging (AltDS-TWR)."""

from __future__ import annotations

from dataclasses import dataclass

from . import SPEED_OF_LIGHT


class DegenerateExchangeError(ValueError):
    pass


@dataclass(frozen=True)
class TwrExchange:
    """Round-trip (Ra, Rb) and reply (Da, Db) delays of one exchange, seconds."""

    Ra: float
    Rb: float
    Da: float
    Db: float

    def __post_init__(self):
        if min(self.Ra, self.Rb, self.Da, self.Db) <= 0:
            raise DegenerateExchangeError("all TWR delays must be > 0")

    @classmethod
    def ideal(cls, tof: float, reply_a: float, reply_b: float) -> "TwrExchange":
        """Exchange observed with perfect clocks for a true time of flight `tof`."""
        return cls(Ra=2 * tof + reply_b, Rb=2 * tof + reply_a, Da=reply_a, Db=reply_b)


def time_of_flight(x: TwrExchange) -> float:
    denom = 2.0 * (x.Ra + x.Da)
    if denom <= 0:
        raise DegenerateExchangeError("non-positive denominator")
    tof = (x.Ra * x.Rb - x.Da * x.Db) / denom
    if tof < 0:
        # surfaced rather than clamped: a negative flight time means a broken exchange
        raise DegenerateExchangeError(f"negative time of flight {tof!r}")
    return tof


def range_from_tof(tf: float, c: float = SPEED_OF_LIGHT) -> float:
    if tf < 0:
        raise ValueError("time of flight must be >= 0")
    return c * tf


def single_sided_tof(round_trip: float, reply: float) -> float:
    """Single-sided TWR estimate, used as the comparison point for clock asymmetry."""
    return 0.5 * (round_trip - reply)
