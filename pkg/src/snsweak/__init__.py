"""Weak approximation of the 2D stochastic Navier-Stokes equations on the torus."""
