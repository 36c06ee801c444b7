"""persistkern: persistent-worker offload runtime, simulator, and benchmarks.

Work is dispatched to individual clusters of an emulated accelerator
through a pair of single-writer mailbox words per cluster, and the
latency profile of that dispatch path is measured phase by phase against
a conventional spawn-per-kernel baseline.
"""

__version__ = "0.1.0"
