"""Feature extractor producing .glmc embedding containers for OOD evaluation."""

__version__ = "0.1.0"

from .backbones import ImageEncoding, load_backbone
from .container import ContainerError, ExportRecord, write_container
from .pipeline import (
    ExtractionError,
    PromptTemplate,
    encode_image_files,
    encode_text,
    export,
    resolve_image_files,
)

__all__ = [
    "ContainerError",
    "ExportRecord",
    "ExtractionError",
    "ImageEncoding",
    "PromptTemplate",
    "encode_image_files",
    "encode_text",
    "export",
    "load_backbone",
    "resolve_image_files",
    "write_container",
    "__version__",
]
