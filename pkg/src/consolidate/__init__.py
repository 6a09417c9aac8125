"""Parameter-level model consolidation: merge operators over MRGF checkpoints
plus a synthetic multi-expert testbed."""

__version__ = "0.1.0"
