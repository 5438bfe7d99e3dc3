"""dialogmem: clarify-then-answer assistant with an episodic event store.

The service clarifies ambiguous user questions through iterative follow-ups,
distills corrected dialogues into an append-only event database, retrieves
past events by paired image/text embedding similarity, and exports
accumulated events as training batches once a threshold is reached.
"""

__version__ = "0.1.0"
