"""Numerical companion for quasi-periodic NLS solutions by a Nash-Moser scheme.

Modules
-------
lattice       site arithmetic on Z^nu x Z^d x {0,1}
smatrix       site matrices and the s-norm calculus
constants     K0, calibrated C(s) and the constants manifest
nls_operator  Fourier-side assembly of the linearised operators
multiscale    multiscale inversion step with goodness certificates
separation    clustering of singular sites
measure       bad parameter sets and measure estimates
nash_moser    Galerkin Nash-Moser iteration
cli           command line front end
"""
__version__ = "0.1.0"
