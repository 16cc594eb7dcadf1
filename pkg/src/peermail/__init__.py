"""Serverless peer-to-peer mail: protocol engine and simulator."""

__version__ = "0.1.0"
