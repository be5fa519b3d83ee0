"""Multi-expert vision-language toy lab on a numpy autodiff core."""

from .experts import ExpertSpec, SyntheticImage, make_expert, preset, preset_specs
from .fusion import FusionConfig, fuse, group_patches
from .lm import DecoderConfig
from .model import PolyExpertModel, Sample
from .positional import assign_positions, position_budget

__version__ = "0.1.0"
