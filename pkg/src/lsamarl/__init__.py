"""MAPPO with a Local State Attention encoder for mixed-traffic on-ramp merging."""

__version__ = "0.1.0"
