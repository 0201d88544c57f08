# cartlab/errors.py
"""Shared exception hierarchy."""

from typing import Optional


class CartlabError(Exception):
    """Base class for every error raised by cartlab."""
    pass


class NotFound(CartlabError):
    """Unknown store, item, node or other named entity."""
    pass


class NoSuchLine(CartlabError):
    """Cart mutation targeted an item that has no line in the cart."""
    pass


class ParseError(CartlabError):
    """Malformed document. `path` points at the offending field."""

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path or "$"
        super().__init__(f"{self.path}: {message}")


class ValidationError(CartlabError):
    """Well-formed document that violates a domain invariant."""
    pass


class ContractViolation(CartlabError):
    """Caller broke a precondition (verdict/activation mismatch, misaligned prefix, ...)."""
    pass


class InvalidInput(CartlabError):
    """Empty or unusable input to an operation."""
    pass


class BudgetExhausted(CartlabError):
    """Rollout budget cannot cover the requested evaluations."""
    pass
