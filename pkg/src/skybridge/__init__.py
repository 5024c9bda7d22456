"""skybridge: wrap compute packages as cloud services with QoS-aware client failover."""

__version__ = "0.1.0"
