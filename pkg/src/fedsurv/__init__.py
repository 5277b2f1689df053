"""Federated survival analysis with jackknife pseudo values."""
