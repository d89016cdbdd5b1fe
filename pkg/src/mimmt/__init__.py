"""Visual-awareness training objectives for multimodal machine translation.

A tiny gated-fusion transformer trained with token-level likelihood plus two
mutual-information terms: an InfoNCE bound tying pooled source text to the
image, and a hinge on the log-probability gap between clean and corrupted
image inputs.
"""

__version__ = "0.1.0"
