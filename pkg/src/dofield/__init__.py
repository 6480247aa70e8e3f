"""Neural density field self-models for articulated robots."""
