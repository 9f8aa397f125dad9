"""Online CP factorization and completion of evolving tensors."""

from gocpt.kernels import BACKEND
from gocpt.tensor import CooTensor, IndexSet, KruskalModel

__version__ = "0.1.0"

__all__ = ["BACKEND", "CooTensor", "IndexSet", "KruskalModel", "__version__"]
