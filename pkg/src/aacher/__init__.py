"""Goal-conditioned DDPG with averaged actor/critic ensembles and hindsight replay."""

__version__ = "0.1.0"
