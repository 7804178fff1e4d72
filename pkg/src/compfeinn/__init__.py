"""Compatible finite element interpolated neural networks.

Networks are interpolated onto curl- and div-conforming finite element
spaces and trained by minimising discrete weak residuals.
"""

__version__ = "0.1.0"
