"""Streaming long-context memory: triangle-attention spans, dynamic span indexes, tiered block retrieval."""
