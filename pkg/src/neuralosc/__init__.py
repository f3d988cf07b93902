"""Second-order neural oscillators: training, bound evaluation and a hysteretic benchmark."""
__version__ = "0.1.0"
