"""Multi-task keyword-spotting / speaker-verification network, desk scale."""

from kwsv.tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad"]
__version__ = "0.1.0"
