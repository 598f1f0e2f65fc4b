"""Multi-session map merging, occupancy change detection, and
traversability-aware roadmap planning."""

__version__ = "0.1.0"
