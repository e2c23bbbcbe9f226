"""guti: a desk-scale classical Chinese poetry generation laboratory.

Corpus serialization into field-marker text sequences, character-level
vocabulary, a from-scratch decoder-only transformer with exact gradients,
an Adam fine-tuning loop with retrieval-based novelty tracking, truncated
top-k decoding, and a mechanized form-conformance validator.
"""

from .errors import GutiError

__version__ = "0.1.0"

__all__ = ["GutiError", "__version__"]
