"""
BSDE generators, the lattice / ODE value solver, verification oracles and CSV outputs
"""
