"""Context-conditioned editing of single layers in layered RGBA scenes."""

from .bench import (
    EditInstance,
    alpha_frechet,
    composite_on_gray,
    generate_protocol,
    mse,
    psnr,
    region_masks,
    run_benchmark,
)
from .codec import LatentGrid, TokenStream, ToyCodec, pack, unpack
from .engine import EditConfig, Editor, edit_layer, edit_multi, make_schedule, noise
from .layers import (
    LayeredScene,
    OpaqueImage,
    RgbaLayer,
    composite_over,
    composite_scene,
    opaque_context,
    replace_layer,
)
from .model import AnalyticModel, ToyTransformer, VelocityRequest, cfg_velocity, embed_prompt

__version__ = "0.1.0"
