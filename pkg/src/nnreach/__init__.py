"""Guaranteed reachability for closed loops with sigmoid/tanh network controllers.

Networks are turned into hybrid automata whose modes compute one layer each;
the closed loop with a plant model is then propagated with Taylor-model
flowpipes and checked against safety and reward properties.
"""

__version__ = "0.1.0"
