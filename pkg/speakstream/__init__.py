__all__ = ["core", "app"]
