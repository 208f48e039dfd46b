"""Numerical laboratory for the Hermitian-Einstein heat flow on bundles over Gauduchon surfaces.

Modules
-------
forms      pointwise exterior algebra of complex forms
grid       periodic torus grid, spectral derivatives and Hermitian metrics
bundle     twisted bundles, Chern connections, curvature and degree
flow       the heat flow on metrics, monitors, identities and gauge transport
stability  HN types, HYM lower bounds and the HN projection
cli        command line front end
"""
__version__ = "0.1.0"
