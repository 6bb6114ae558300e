"""Deep metric learning toolkit: embedding I/O, retrieval metrics, FID-based
benchmark splits, self-distillation losses and small trainable heads."""

__version__ = "0.1.0"

from .embed_store import EmbeddingSet, SynthSpec, load_any, synth_gaussian_classes  # noqa: E402
from .errors import DMLError  # noqa: E402
from .fid import fid_between, frechet_distance, summarize  # noqa: E402
from .splits import ags, build_split_sequence  # noqa: E402

__all__ = [
    "__version__", "EmbeddingSet", "SynthSpec", "load_any", "synth_gaussian_classes", "DMLError",
    "fid_between", "frechet_distance", "summarize", "ags", "build_split_sequence",
]
