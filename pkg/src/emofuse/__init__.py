"""Multimodal emotion classification built from explicit, verifiable pieces:
attention pooling over fused feature sequences, a dense classifier trained
with weighted cross-entropy and AdamW, an audio augmentation pipeline, and a
hard-voting ensemble."""

__version__ = "0.1.0"
