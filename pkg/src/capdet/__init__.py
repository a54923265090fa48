"""Synthetic-image detection as captioning, at desk scale.

Tiny ViT/GPT-style captioners (cross-attention fusion or a query bridge),
LoRA adapters, single-logit baselines, a procedural multi-generator corpus
and the evaluation harness, all on a small numpy autograd engine.
"""

__version__ = "0.1.0"
