"""Multiagent actor-critic with a bidirectional recurrent communication channel."""

__version__ = "0.1.0"
