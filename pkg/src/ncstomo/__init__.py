__all__ = [
    "circulant",
    "ops",
    "prox",
    "solvers",
    "problems",
    "phantom",
    "fileio",
    "bench",
]

__version__ = "0.1.0"
