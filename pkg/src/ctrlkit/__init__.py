"""ctrlkit: small conditional transformer language models you can steer.

Train tiny transformer LMs on multi-domain corpora with control codes,
generate text with penalized / top-k / nucleus sampling, and rank training
domains for a piece of text by Bayes rule.
"""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, tensor  # noqa: F401
