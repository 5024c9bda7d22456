from .core import ConflictError, PortalCore, ServiceCatalogEntry, Session

__all__ = ["ConflictError", "PortalCore", "ServiceCatalogEntry", "Session"]
