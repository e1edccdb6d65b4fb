"""Real-model bundle export and prompt decoding for the segmentation engine."""
from .decoder_service import DecoderService, serve_decoder
from .errors import CheckpointError, ExporterError
from .export import ExportJob, ModelPack, export_bundle, load_models, resolve_device
from .layout import WindowPlan, axis_origins, plan_crops
from .templates import IMAGENET_TEMPLATES

__all__ = [
    "CheckpointError",
    "DecoderService",
    "ExportJob",
    "ExporterError",
    "IMAGENET_TEMPLATES",
    "ModelPack",
    "WindowPlan",
    "axis_origins",
    "export_bundle",
    "load_models",
    "plan_crops",
    "resolve_device",
    "serve_decoder",
]
