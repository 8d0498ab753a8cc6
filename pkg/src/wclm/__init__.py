"""Desk-scale warranty-claim language modeling stack.

Byte-level BPE tokenization, a decoder-only transformer (RoPE, RMSNorm,
SwiGLU) on a reverse-mode autodiff numpy substrate, LoRA fine-tuning under a
masked autoregressive objective, decoding strategies, an automated metric
suite, rank-correlation analysis, and governance reporting.
"""

__version__ = "0.1.0"
