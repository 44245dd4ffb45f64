"""Ride-pooling fleet simulation with batch assignment and forecast-driven repositioning."""

__version__ = "0.1.0"
