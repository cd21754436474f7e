# Loads settings and pins float64 before any tensor is built
from app.core import config  # noqa: F401
