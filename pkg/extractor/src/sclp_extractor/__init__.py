"""One-shot batch tool: frozen CLIP-style backbone to SCLP feature files."""

from .backbone import Backbone, BackboneUnavailableError, TokenizerOverflowError, load_backbone
from .extract import ExtractJob, embed_prompt_list, extract_image_features

__version__ = "0.1.0"
