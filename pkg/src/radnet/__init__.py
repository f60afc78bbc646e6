"""RADnet: slice-level and CT-level hemorrhage detection on a small numpy autodiff engine."""

__version__ = "0.1.0"
