"""Configuration models for the pyramid head and the FLOPs cost model."""

from enum import Enum
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class BNMode(str, Enum):
    """Batch-normalization variants for feature pyramids."""
    SINGLE = "single"
    INDEPENDENT = "independent"
    INTEGRATED = "integrated"


class SepcVariant(str, Enum):
    """Where deformable (scale-equalizing) kernels are used in the head."""
    NONE = "none"
    LITE = "lite"
    FULL = "full"


class SizeMode(str, Enum):
    """How level sizes are derived from the image size and stride."""
    FRACTIONAL = "fractional"
    CEIL = "ceil"


class HeadConfig(BaseModel):
    """Configuration of the stacked pyramid head.

    Attributes:
        stacks: Number of shared PConv modules (2-6)
        channels: Feature channels of every pyramid level
        combined: Share the stacks between classification and localization
        extra_conv: Add one non-shared extra convolution per branch
        bn_mode: Normalization after every stack and extra conv, None for off
        sepc_variant: none, lite (extra head only) or full (stacks and extra head)
        num_classes: Classes C of the final classification convolution
        anchors: Anchors K per location of the final convolutions
        seed: Seed of the weight initializer
        scale_kernel: Scale extent of the stacks, 3 for PConv, 1 for plain convs
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    stacks: int = Field(default=4, ge=2, le=6)
    channels: int = Field(default=256, ge=1)
    combined: bool = True
    extra_conv: bool = True
    bn_mode: Optional[BNMode] = BNMode.INTEGRATED
    sepc_variant: SepcVariant = SepcVariant.NONE
    num_classes: Optional[int] = Field(default=None, ge=1)
    anchors: Optional[int] = Field(default=None, ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    scale_kernel: Literal[1, 3] = 3

    @field_validator("bn_mode", mode="before")
    @classmethod
    def _off_means_none(cls, value):
        if value is None or (isinstance(value, str) and value.strip().lower() in ("", "off", "none")):
            return None
        return value

    @field_validator("num_classes", "anchors", mode="before")
    @classmethod
    def _empty_means_none(cls, value):
        if isinstance(value, str) and value.strip() == "":
            return None
        return value

    @model_validator(mode="after")
    def _outputs_complete(self):
        if (self.num_classes is None) != (self.anchors is None):
            raise ValueError("num_classes and anchors must be given together")
        return self

    @property
    def outputs(self) -> Optional[Tuple[int, int]]:
        """(num_classes, anchors) when final output convolutions are configured."""
        if self.num_classes is None:
            return None
        return self.num_classes, self.anchors


class CostModelInput(BaseModel):
    """Inputs of the analytical head FLOPs model."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    img_channels: int = Field(default=3, ge=1)
    img_height: int = Field(default=1280, ge=1)
    img_width: int = Field(default=800, ge=1)
    min_level: int = Field(default=3, ge=0, le=16)
    levels: int = Field(default=5, ge=1, le=12)
    channels: int = Field(default=256, ge=1)
    kernel_h: int = Field(default=3, ge=1)
    kernel_w: int = Field(default=3, ge=1)
    size_mode: SizeMode = SizeMode.FRACTIONAL
    include_upsample: bool = False

    @property
    def level_names(self) -> List[str]:
        return [f"P{l}" for l in range(self.min_level, self.min_level + self.levels)]

    @property
    def strides(self) -> List[int]:
        return [2 ** l for l in range(self.min_level, self.min_level + self.levels)]
