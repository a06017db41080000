"""uukin: quantum kinetic toolbox.

Modules:
    model      — statistics, Gaussian potential/datum, quasi-free Wigner data
    quad       — reproducible stratified Monte Carlo, Delta^+, collision sphere
    hierarchy  — scaled hierarchy operators and the eps-dependent expansion terms
    limits     — limiting terms, vanishing-term verdicts, limit assembly
    collision  — Uehling-Uhlenbeck operator, H-functional, equilibria, relaxation
    quasifree  — quasi-free Bose states from a one-particle operator
    cli        — command-line experiment runner
"""

__version__ = "0.1.0"
