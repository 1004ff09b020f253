"""Desk-scale laboratory for muting parametric knowledge in a toy transformer.

A from-scratch numpy decoder memorizes a synthetic fact base, a conflict
benchmark is elicited from it, FFN layers whose activations track unfaithful
answers are located and suppressed, and a low-rank adapter is trained to
prefer the context.
"""

__version__ = "0.1.0"
