"""Tree-structured key/value compression for long-context language modelling.

The first M layers of a decoder encode each context chunk into a
query-dependent binary tree of downsampled key/value states; the same
decoder's first M layers read them back through cross-attention with one
rotary index per chunk.
"""

__version__ = "0.1.0"
