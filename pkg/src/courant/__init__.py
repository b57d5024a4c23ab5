"""Courant: geometry-anchored encoder-processor-decoder surrogate."""
