"""Retrieve-and-read question answering over a passage corpus."""

__version__ = "0.1.0"

from .model import Hyperparams
from .retriever import Corpus, build_index, top_k
from .text import load_vectors, tokenize

__all__ = ["Hyperparams", "Corpus", "build_index", "top_k", "load_vectors",
           "tokenize", "__version__"]
