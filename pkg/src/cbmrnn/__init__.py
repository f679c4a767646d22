"""Context Bridge Module recurrent networks in numpy: a small reverse-mode
autodiff engine, the CBM cell with Temporal Dropout, overlap coherence
training on short clips, and two synthetic video tasks."""

__version__ = "0.1.0"
