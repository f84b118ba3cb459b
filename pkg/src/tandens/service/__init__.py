"""Service layer: pydantic request/response schemas, operation handlers, and
the FastAPI application. The CLI drives the same handlers in-process."""

from . import ops, schemas

__all__ = ["ops", "schemas"]
