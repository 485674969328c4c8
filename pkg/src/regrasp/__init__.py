"""Self-supervised visuo-tactile regrasping on a simulated parallel-jaw gripper."""

__version__ = "0.1.0"
