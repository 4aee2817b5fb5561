"""Meta-learned zero- and few-shot face anti-spoofing on a small numpy autodiff engine."""

__version__ = "0.1.0"
