"""Feature exporter: frozen vision backbones to engine feature files."""

from .export import ExportResult, export
from .spec import ExportSpec

__version__ = "0.1.0"

__all__ = ["ExportResult", "ExportSpec", "export", "__version__"]
