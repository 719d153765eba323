from .app import create_app, default_segmenter_factory

__all__ = ["create_app", "default_segmenter_factory"]
