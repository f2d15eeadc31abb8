"""Deployment synthesis, orchestration planning and adaptation simulation
for microservice architectures."""

__version__ = "0.1.0"
