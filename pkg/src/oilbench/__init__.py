"""Online imitation learning as online optimization: learners, environments and regret checks."""

__version__ = "0.1.0"
