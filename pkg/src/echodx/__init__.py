"""Cine-loop classification desk pipeline.

Library + CLI covering the full workflow: synthetic phantom cine-loops,
preprocessing to normalized 30x112x112 clips, a factorized (2+1)D
convolutional classifier trained with Adam and early stopping, DeepLIFT
relevance attribution, exact tSNE embedding, and confusion-matrix metrics.
"""

__version__ = "0.1.0"

from echodx.ect import read_ect, write_ect
from echodx.autodiff import Tensor, Parameter, Tape

__all__ = ["read_ect", "write_ect", "Tensor", "Parameter", "Tape", "__version__"]
