"""Automated model search for collaborative filtering.

Models are described as a choice per stage (input encoding, embedding,
interaction, prediction) plus an embedding size and a learning rate; the
package trains and ranks such models, reproduces the classic baselines that
live inside the same space, and searches the space with a surrogate-guided
random strategy.
"""

__version__ = "0.1.0"
