"""Environments, replay, learning algorithms, DVM and the experiment harness."""
