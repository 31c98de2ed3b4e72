"""Desk-scale concept-augmented, attention-controlled video editing."""
