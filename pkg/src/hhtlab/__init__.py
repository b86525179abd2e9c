"""Semi-implicit and adaptive integrators for Hodgkin-Huxley-type ODE systems."""

__version__ = "0.1.0"
