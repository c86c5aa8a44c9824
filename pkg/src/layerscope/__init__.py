"""Layer-wise training-data exposure measurement and partitioned (enclave) training."""

__version__ = "0.1.0"
