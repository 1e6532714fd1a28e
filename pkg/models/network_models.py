from enum import Enum
from math import ceil
from typing import List, Optional

from pydantic import BaseModel, Field, model_validator


class DropoutVariant(str, Enum):
    NONE = "none"
    MC_BERNOULLI = "mc-bernoulli"
    MC_GAUSSIAN = "mc-gaussian"
    CONCRETE = "concrete"
    CONTEXTUAL_GATING = "contextual-gating"
    CONTEXTUAL_BERNOULLI = "contextual-bernoulli"
    CONTEXTUAL_GAUSSIAN = "contextual-gaussian"

    @property
    def is_contextual(self) -> bool:
        return self in (
            DropoutVariant.CONTEXTUAL_GATING,
            DropoutVariant.CONTEXTUAL_BERNOULLI,
            DropoutVariant.CONTEXTUAL_GAUSSIAN,
        )

    @property
    def is_fixed_rate(self) -> bool:
        return self in (DropoutVariant.MC_BERNOULLI, DropoutVariant.MC_GAUSSIAN)


class Nonlinearity(str, Enum):
    LEAKY_RELU = "leaky-relu"
    RELU = "relu"


class SiteConfig(BaseModel):
    """One dropout location.

    ``broadcast_dim`` is 1-based into ``activation_shape`` (the per-sample
    shape of U, without the batch axis).
    """

    site_id: str
    variant: DropoutVariant
    activation_shape: List[int] = Field(min_length=1)
    broadcast_dim: int = Field(1, ge=1)
    gamma: int = Field(10, ge=1)
    t: float = Field(0.01, gt=0)
    nonlinearity: Nonlinearity = Nonlinearity.LEAKY_RELU
    leaky_slope: float = Field(0.1, ge=0)
    rate: Optional[float] = Field(None, gt=0, lt=1)
    init_rate: float = Field(0.2, gt=0, lt=1)
    temperature: float = Field(0.1, gt=0)
    gating_dropout_rate: Optional[float] = Field(None, gt=0, lt=1)

    @model_validator(mode="after")
    def check_variant_parameters(self):
        if any(extent < 1 for extent in self.activation_shape):
            raise ValueError("activation extents must be positive")
        if self.broadcast_dim > len(self.activation_shape):
            raise ValueError(
                f"broadcast_dim {self.broadcast_dim} out of range for shape {self.activation_shape}"
            )
        if self.variant.is_fixed_rate and self.rate is None:
            raise ValueError(f"{self.variant.value} sites need a fixed rate")
        if not self.variant.is_fixed_rate and self.rate is not None:
            raise ValueError(f"{self.variant.value} sites do not take a fixed rate")
        if self.gating_dropout_rate is not None and self.variant != DropoutVariant.CONTEXTUAL_GATING:
            raise ValueError("gating_dropout_rate only applies to contextual-gating sites")
        return self

    @property
    def logit_width(self) -> int:
        return self.activation_shape[self.broadcast_dim - 1]

    @property
    def hidden_width(self) -> int:
        return max(1, ceil(self.logit_width / self.gamma))


class MlpSpec(BaseModel):
    widths: List[int] = Field(default_factory=lambda: [784, 300, 100, 10], min_length=2)
    # stage 0 is the input, stage s >= 1 the output of hidden layer s
    sites: List[SiteConfig] = []
    site_stages: List[int] = []

    @model_validator(mode="after")
    def check_sites(self):
        if any(w < 1 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if len(self.sites) != len(self.site_stages):
            raise ValueError("sites and site_stages must have equal length")
        hidden = len(self.widths) - 2
        if len(set(self.site_stages)) != len(self.site_stages):
            raise ValueError("at most one site per stage")
        for stage, site in zip(self.site_stages, self.sites):
            if not 0 <= stage <= hidden:
                raise ValueError(f"site stage {stage} outside 0..{hidden}")
            if site.activation_shape != [self.widths[stage]]:
                raise ValueError(
                    f"site {site.site_id} expects shape {site.activation_shape}, stage {stage} has width {self.widths[stage]}"
                )
        return self

    @property
    def num_classes(self) -> int:
        return self.widths[-1]

    @property
    def hidden_stages(self) -> int:
        return len(self.widths) - 2
