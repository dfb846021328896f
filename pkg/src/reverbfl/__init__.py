"""Federated audio classification under input poisoning, defended by a server-side reserve set."""

__version__ = "0.1.0"
