from .blocks import CSFF, SAM, HINBlock, ResBlock, SARBlock, SARConfig
from .module import Conv2d, ConvTranspose2d, GroupNorm, Linear, Module, ModuleList, Parameter, kaiming_normal

__all__ = [
    "CSFF",
    "Conv2d",
    "ConvTranspose2d",
    "GroupNorm",
    "HINBlock",
    "Linear",
    "Module",
    "ModuleList",
    "Parameter",
    "ResBlock",
    "SAM",
    "SARBlock",
    "SARConfig",
    "kaiming_normal",
]
