from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Literal, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Triple = Tuple[int, int, int]

U64_MAX = 2**64 - 1


class ClassLabel(str, Enum):
    bona_fide = "BonaFide"
    silicone_mask = "SiliconeMask"
    wrap_photo = "WrapPhoto"

    def binary(self) -> "BinaryClass":
        if self is ClassLabel.bona_fide:
            return BinaryClass.bona_fide
        return BinaryClass.attack

    @property
    def is_attack(self) -> bool:
        return self.binary() is BinaryClass.attack


class BinaryClass(str, Enum):
    bona_fide = "bona_fide"
    attack = "attack"

    @property
    def index(self) -> int:
        # column of this class in the softmax output
        return 1 if self is BinaryClass.attack else 0


PAI_KINDS = (ClassLabel.silicone_mask, ClassLabel.wrap_photo)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class AugmentSpec(_Section):
    rotation_copies: int = Field(12, ge=1, description="Copies rotated about the vertical axis")
    jitter_sigma: float = Field(0.005, ge=0.0, description="Gaussian jitter std (normalized units)")
    mirror: bool = Field(True, description="Mirror across x=0.5 with probability 0.5")
    shift_max: float = Field(0.02, ge=0.0, description="Uniform shift bound per axis")
    rng_seed: int = Field(0, ge=0, le=U64_MAX)


class GridSpec(_Section):
    resolution: int = Field(64, ge=1)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    extent: float = Field(1.0, gt=0.0)


class ConvSpec(_Section):
    filter: Triple
    filters: int = Field(..., ge=1)
    stride: Triple = (1, 1, 1)

    @field_validator("filter", "stride")
    @classmethod
    def _positive(cls, v: Triple) -> Triple:
        if any(c < 1 for c in v):
            raise ValueError("every component must be >= 1")
        return v

    @property
    def padding(self) -> Triple:
        # "same-ish" padding so spatial dims follow D / stride
        return tuple(k // 2 for k in self.filter)  # type: ignore[return-value]

    def with_filter(self, size: int) -> "ConvSpec":
        return self.model_copy(update={"filter": (size, size, size)})


class FilterVariant(str, Enum):
    paper_default = "paper_default"
    all_3x3 = "all_3x3"
    all_5x5 = "all_5x5"
    all_7x7 = "all_7x7"
    custom = "custom"

    @property
    def uniform_size(self) -> int | None:
        return {"all_3x3": 3, "all_5x5": 5, "all_7x7": 7}.get(self.value)


DEFAULT_CONVS: Dict[str, ConvSpec] = {
    "conv1": ConvSpec(filter=(5, 5, 5), filters=64, stride=(2, 2, 2)),
    "conv2": ConvSpec(filter=(3, 3, 3), filters=32, stride=(1, 1, 1)),
    "conv3": ConvSpec(filter=(3, 3, 3), filters=32, stride=(1, 1, 1)),
    "tail_conv": ConvSpec(filter=(3, 3, 3), filters=32, stride=(1, 1, 1)),
}

# Calibrated so that the default 64^3 configuration lands near 35.7M parameters.
DEFAULT_FC_HIDDEN = 34


class ModelConfig(_Section):
    input_resolution: int = Field(64, ge=1)
    conv1: ConvSpec = DEFAULT_CONVS["conv1"]
    conv2: ConvSpec = DEFAULT_CONVS["conv2"]
    conv3: ConvSpec = DEFAULT_CONVS["conv3"]
    attention_enabled: bool = True
    attention_hidden: int = Field(16, ge=1)
    tail_conv: ConvSpec = DEFAULT_CONVS["tail_conv"]
    fc_hidden: int = Field(DEFAULT_FC_HIDDEN, ge=1)
    num_classes: Literal[2] = 2
    leaky_slope: float = Field(0.01, ge=0.0)
    filter_variant: FilterVariant = FilterVariant.paper_default
    init_seed: int = Field(0, ge=0, le=U64_MAX)

    @model_validator(mode="after")
    def _check_convs(self):
        if self.filter_variant is not FilterVariant.custom:
            for name, default in DEFAULT_CONVS.items():
                if getattr(self, name) != default:
                    raise ValueError(
                        f"{name} differs from the default layout; set filter_variant = 'custom' to use it"
                    )
        if self.attention_enabled and self.conv3.filters % 2:
            raise ValueError("conv3.filters must be even when attention is enabled")
        return self

    def resolved_convs(self) -> Dict[str, ConvSpec]:
        convs = {name: getattr(self, name) for name in DEFAULT_CONVS}
        size = self.filter_variant.uniform_size
        if size is not None:
            convs = {name: spec.with_filter(size) for name, spec in convs.items()}
        return convs

    @property
    def gate_width(self) -> int:
        # each branch emits half of conv3's channels so the concat matches it
        return self.conv3.filters // 2


class TrainConfig(_Section):
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(0.01, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    epochs: int = Field(30, ge=1)
    augment: AugmentSpec = AugmentSpec()
    rng_seed: int = Field(0, ge=0, le=U64_MAX)
    deterministic: bool = False


class SynthSpec(_Section):
    kind: ClassLabel
    points_per_cloud: int = Field(5000, ge=100)
    sessions: int = Field(10, ge=1)
    noise_sigma: float = Field(0.0005, ge=0.0, description="Sensor noise std in meters")


class DataConfig(_Section):
    n_bona_identities: int = Field(12, ge=0)
    n_mask_identities: int = Field(4, ge=0)
    n_wrap_identities: int = Field(8, ge=0)
    sessions: int = Field(10, ge=1)
    points_per_cloud: int = Field(5000, ge=100)
    noise_sigma: float = Field(0.0005, ge=0.0)
    master_seed: int = Field(0, ge=0, le=U64_MAX)

    def synth_spec(self, kind: ClassLabel) -> SynthSpec:
        return SynthSpec(
            kind=kind,
            points_per_cloud=self.points_per_cloud,
            sessions=self.sessions,
            noise_sigma=self.noise_sigma,
        )


class ProtocolMode(str, Enum):
    intra = "Intra"
    inter = "Inter"
    both = "Both"


class ProtocolSpec(_Section):
    mode: ProtocolMode = ProtocolMode.intra
    train_pai: List[ClassLabel] = Field(default_factory=lambda: [ClassLabel.silicone_mask])
    test_pai: List[ClassLabel] = Field(default_factory=lambda: [ClassLabel.silicone_mask])
    seed: int = Field(0, ge=0, le=U64_MAX)

    @field_validator("train_pai", "test_pai")
    @classmethod
    def _pai_only(cls, v: List[ClassLabel]) -> List[ClassLabel]:
        if not v:
            raise ValueError("at least one PAI species is required")
        if ClassLabel.bona_fide in v:
            raise ValueError("bona fide is not a PAI species")
        return sorted(set(v), key=PAI_KINDS.index)

    @model_validator(mode="after")
    def _mode_rules(self):
        train, test = set(self.train_pai), set(self.test_pai)
        if self.mode is ProtocolMode.intra:
            if train != test or len(train) != 1:
                raise ValueError("Intra protocol needs the same single PAI on both sides")
        elif self.mode is ProtocolMode.inter:
            if train & test:
                raise ValueError("Inter protocol needs disjoint train/test PAIs")
        elif train != set(PAI_KINDS) or test != set(PAI_KINDS):
            raise ValueError("Both protocol needs both PAIs on both sides")
        return self

    @property
    def label(self) -> str:
        def short(pais: List[ClassLabel]) -> str:
            names = {ClassLabel.silicone_mask: "Mask", ClassLabel.wrap_photo: "Wrap"}
            return " & ".join(names[p] for p in pais)

        return f"{self.mode.value}:{short(self.train_pai)}->{short(self.test_pai)}"


class RunConfig(_Section):
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    protocol: ProtocolSpec = ProtocolSpec()


# Bundle verification outcome; empty errors means the bundle checks out.
@dataclass
class VerificationResult:
    bundle_hash: str
    errors: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors
