"""AMFP feature exporter and VIA annotation converter."""

from .annotations import (ConversionReport, convert_annotations,
                          write_annotation_lines)
from .export import (AMFP_MAGIC, AMFP_VERSION, BACKBONE_STRIDE, ExportConfig,
                     export_pyramids, extract_feature_maps, load_backbone,
                     read_manifest, write_amfp, write_manifest)

__version__ = "0.1.0"
