"""Randomized-smoothing certification for PEFT-adapted vision transformers."""
