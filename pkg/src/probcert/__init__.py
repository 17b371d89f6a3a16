"""Probabilistic-invariance safety certificates for stochastic control-affine systems."""
