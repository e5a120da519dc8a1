"""Intelligent-driver-model car-following law."""

from __future__ import annotations

import math
from dataclasses import dataclass

from ..errors import ParameterError

EMERGENCY_DECEL = -9.0


@dataclass(frozen=True)
class IdmParams:
    """Car-following parameters (desk defaults tuned for urban speeds)."""

    v0: float = 10.0      # desired speed, m/s
    T: float = 1.5        # time headway, s
    s0: float = 2.0       # jam distance, m
    a_max: float = 2.0    # max acceleration, m/s^2
    b_comf: float = 2.0   # comfortable deceleration, m/s^2
    delta: float = 4.0    # velocity exponent

    def __post_init__(self):
        for name in ("v0", "T", "s0", "a_max", "b_comf", "delta"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"IdmParams.{name} must be positive")

    def with_v0(self, v0: float) -> "IdmParams":
        return IdmParams(v0, self.T, self.s0, self.a_max, self.b_comf, self.delta)


def idm_accel(v: float, v_lead: float | None, gap: float | None,
              params: IdmParams) -> float:
    """Longitudinal acceleration command.

    Free road: pass ``v_lead=None`` (or ``gap=None`` / infinite gap).
    A non-positive gap with a leader present is an emergency: returns
    the emergency clamp (-9 m/s^2) directly. Output is clamped to
    [-9, a_max].
    """
    free = 1.0 - (max(v, 0.0) / params.v0) ** params.delta
    if v_lead is None or gap is None or math.isinf(gap):
        a = params.a_max * free
    else:
        if gap <= 0.0:
            return EMERGENCY_DECEL
        dv = v - v_lead
        s_star = params.s0 + v * params.T + v * dv / (
            2.0 * math.sqrt(params.a_max * params.b_comf)
        )
        a = params.a_max * (free - (s_star / gap) ** 2)
    return min(max(a, EMERGENCY_DECEL), params.a_max)
