"""Nonlinear MPC toolkit for dynamic operation.

Modules
-------
model      : dynamics, constraints, stage costs, references, rollouts
solvers    : dense numerical kernels (Riccati family, LP, QP, SQP)
terminal   : terminal cost/set/law synthesis and scalings
schemes    : MPC optimization problems and one-step controllers
horizon    : stabilizing-horizon certification without terminal ingredients
harness    : closed-loop simulation, traces, metrics
benchmarks : small library of benchmark systems
cli        : command-line front end (synth | certify | run | compare | plot)
"""

from . import model, solvers, terminal, schemes, horizon, harness, benchmarks

__version__ = "0.1.0"

__all__ = [
    "model",
    "solvers",
    "terminal",
    "schemes",
    "horizon",
    "harness",
    "benchmarks",
]
