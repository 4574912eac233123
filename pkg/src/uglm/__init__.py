"""uglm: a desk-scale two-stage graph-text alignment trainer.

Stage I pretrains a multi-scale message-passing encoder against text
embeddings with a domain-reweighted bidirectional contrastive loss.
Stage II tunes a projector into a frozen token space with a gradient-norm
curriculum over domains. All gradients are hand-derived and checked
against a finite-difference oracle.
"""

__version__ = "0.1.0"
