"""Reinforcement-learning bolus policies for simulated type-1 diabetes patients."""

__version__ = "0.1.0"
