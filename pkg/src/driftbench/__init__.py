"""Domain-incremental continual learning at desk scale: three-stage dual-head
training, Gaussian-gated replay buffers and rehearsal baselines on a small
numpy autodiff engine."""

__version__ = "0.1.0"
