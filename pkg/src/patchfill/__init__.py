"""patchfill: patch-token image inpainting with pluralistic sampling."""

__version__ = "0.1.0"
