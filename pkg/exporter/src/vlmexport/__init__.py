"""Attention exporter bridging a multimodal checkpoint to CAT1 files."""

from vlmexport.export import ExportRequest, export_attention, load_checkpoint

__all__ = ["ExportRequest", "export_attention", "load_checkpoint"]

__version__ = "0.1.0"
