"""Object-centric image retrieval with slot attention and a navigation evaluator."""

__version__ = "0.1.0"
