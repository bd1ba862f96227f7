"""Backbone feature-map exporter for the retrieval training pipeline."""

from .backbone import build_feature_extractor
from .export import ExportJob, ExportResult, export_features

__version__ = "0.1.0"
__all__ = ["ExportJob", "ExportResult", "build_feature_extractor", "export_features"]
