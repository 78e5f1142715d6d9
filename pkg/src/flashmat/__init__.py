"""SVBRDF capture from flash photographs via a generative material
prior and differentiable rendering."""

from .brdf import R_MIN, NUM_CHANNELS, SvbrdfMaps
from .render import CaptureView, make_collocated_view, render
from .generator import GeneratorConfig, LatentState, load_generator
from .inversion import FitConfig, LossConfig, fit_direct, fit_latent

__all__ = [
    "R_MIN", "NUM_CHANNELS", "SvbrdfMaps",
    "CaptureView", "make_collocated_view", "render",
    "GeneratorConfig", "LatentState", "load_generator",
    "FitConfig", "LossConfig", "fit_direct", "fit_latent",
]

__version__ = "0.1.0"
