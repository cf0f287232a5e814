"""Buffer-aware transmission scheduling over fading channels.

Finite and infinite horizon dynamic programs, closed-form base-stock
thresholds, two-receiver region policies, lower bounds and a simulator.
"""
from .errors import *  # noqa: F401,F403
from .model import (ChannelModel, ChannelState, EffectiveCurve, LinearHolding,  # noqa: F401
                    BarrierHolding, TabulatedHolding, PowerRateCurve, ProblemSpec,
                    Receiver, ValidatedSpec, load_spec, power_of, rate_of,
                    save_spec, single_receiver, validate)

__version__ = "0.1.0"
