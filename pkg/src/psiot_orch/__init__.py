"""QoS-aware pub/sub IoT traffic orchestration over a BAM-brokered backbone."""

__version__ = "0.1.0"
