"""Desk-scale audio language modeling lab.

A numpy implementation of the full mechanics of a unified audio language
model: residual-vector-quantized audio tokens with delay-pattern layout,
a tiny decoder-only transformer with parallel codebook heads, classifier-free
guidance sampling, staged multimodal training, direct preference optimization,
and a generate-listen-critique-refine loop, all verified against a procedural
synthetic audio world with exact oracles.
"""

__version__ = "0.1.0"
