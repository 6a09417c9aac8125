"""Desk-scale multi-expert testbed: synthetic tasks, an MLP, training and evaluation."""
