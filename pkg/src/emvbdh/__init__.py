"""Blinded Diffie-Hellman card authentication: symbolic models, an
unlinkability checker and a concrete runtime over a mock pairing group."""
