from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# ============================================================================
# Errors
# ============================================================================


class AnyADError(Exception):
    """Base class for every error raised by the detector"""


class ShapeError(AnyADError):
    """Tensor dimensions do not line up"""


class ContractError(AnyADError):
    """A documented precondition was violated"""


class ConfigurationError(AnyADError):
    """Configuration is malformed or incomplete"""


class ParseError(AnyADError):
    """Malformed binary input"""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NiftiFormatError(ParseError):
    """NIfTI-1 header or payload is malformed"""


class UnsupportedDatatypeError(NiftiFormatError):
    """NIfTI datatype code outside the supported set"""


class CheckpointFormatError(ParseError):
    """Checkpoint archive is malformed"""


class BlobFormatError(ParseError):
    """Sample blob is malformed"""


class UndefinedMetricError(AnyADError):
    """Metric undefined for the given labels (e.g. a single class)"""


class NonFiniteError(AnyADError):
    """NaN or Inf in a named term"""

    def __init__(self, term: str, detail: str = ""):
        super().__init__(f"non-finite value in '{term}'{': ' + detail if detail else ''}")
        self.term = term


class VerificationError(AnyADError):
    """A verification suite reported failures"""


# ============================================================================
# Modalities
# ============================================================================

MODALITY_NAMES = ("flair", "t1", "t2")

# combo index -> present channels, in the column order of the result tables
COMBINATIONS: dict[int, tuple[bool, bool, bool]] = {
    1: (True, False, False),
    2: (False, True, False),
    3: (False, False, True),
    4: (True, True, False),
    5: (True, False, True),
    6: (False, True, True),
    7: (True, True, True),
}


class ModalityMask(BaseModel):
    """Per-batch presence vector over the modality channels"""

    model_config = ConfigDict(frozen=True)

    present: tuple[bool, ...]

    @field_validator("present")
    @classmethod
    def _at_least_one(cls, value: tuple[bool, ...]) -> tuple[bool, ...]:
        if not any(value):
            raise ValueError("modality mask must keep at least one channel")
        return value

    @classmethod
    def from_combo(cls, combo: int) -> "ModalityMask":
        if combo not in COMBINATIONS:
            raise ContractError(f"combo index must be in 1..7, got {combo}")
        return cls(present=COMBINATIONS[combo])

    @classmethod
    def full(cls, channels: int = 3) -> "ModalityMask":
        return cls(present=(True,) * channels)

    @property
    def combo(self) -> Optional[int]:
        for index, present in COMBINATIONS.items():
            if present == self.present:
                return index
        return None

    def describe(self) -> str:
        names = [n for n, p in zip(MODALITY_NAMES, self.present) if p]
        return "+".join(names)


# ============================================================================
# Configuration
# ============================================================================


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EncoderConfig(_Strict):
    image_size: int = 64
    patch_size: int = 8
    in_channels: int = 3
    embed_dim: int = 64
    depth: int = 8
    heads: int = 4
    shallow_layers: list[int] = Field(default_factory=lambda: [1, 2, 3, 4])
    deep_layers: list[int] = Field(default_factory=lambda: [5, 6, 7, 8])
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "EncoderConfig":
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        layers = set(range(1, self.depth + 1))
        shallow, deep = set(self.shallow_layers), set(self.deep_layers)
        if not shallow or not deep:
            raise ValueError("shallow_layers and deep_layers must be non-empty")
        if not (shallow | deep) <= layers:
            raise ValueError(f"layer indices must lie in 1..{self.depth}")
        if shallow & deep:
            raise ValueError("shallow_layers and deep_layers must be disjoint")
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid * self.grid


class TeacherConfig(_Strict):
    pretrain_steps: int = 0
    pretrain_lr: float = 1e-3
    pretrain_mask_ratio: float = 0.5


class InpConfig(_Strict):
    num_prototypes: int = 6
    init_std: float = 0.02

    @field_validator("num_prototypes")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value < 1:
            raise ValueError("num_prototypes must be >= 1")
        return value


class DecoderConfig(_Strict):
    depth: int = 4
    group0_layers: list[int] = Field(default_factory=lambda: [1, 2])
    group1_layers: list[int] = Field(default_factory=lambda: [3, 4])
    normalize_attention: bool = True
    attn_residual: bool = False

    @model_validator(mode="after")
    def _check(self) -> "DecoderConfig":
        layers = set(range(1, self.depth + 1))
        for name in ("group0_layers", "group1_layers"):
            group = set(getattr(self, name))
            if not group:
                raise ValueError(f"{name} must be non-empty")
            if not group <= layers:
                raise ValueError(f"{name} must lie in 1..{self.depth}")
        return self


class OptimizerConfig(_Strict):
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


ALIGN_POINTS = ("en0", "en1", "bn")


class TrainConfig(_Strict):
    steps: int = 2000
    batch_size: int = 8
    seed: int = 7
    lambda1: float = 0.2
    lambda2: float = 0.2
    gamma: float = 3.0
    weight_direction: Literal["paper", "prose"] = "paper"
    combo_sampling: Literal["uniform7", "full-only"] = "uniform7"
    align_points: list[str] = Field(default_factory=lambda: ["en1"])
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    warmup_steps: int = 0
    checkpoint_every: int = 100
    log_every: int = 50

    @field_validator("align_points", mode="before")
    @classmethod
    def _expand_points(cls, value):
        if isinstance(value, str):
            value = {"both": ["en0", "en1"], "none": []}.get(value, [value])
        unknown = [p for p in value if p not in ALIGN_POINTS]
        if unknown:
            raise ValueError(f"unknown alignment points {unknown}; expected {ALIGN_POINTS}")
        return list(dict.fromkeys(value))

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        return self


class ScoreConfig(_Strict):
    sigma: float = 4.0
    image_score: Literal["top1pct", "max"] = "top1pct"
    aupro_fpr_limit: float = 0.3
    aupro_mode: Literal["exact", "binned"] = "exact"
    batch_size: int = 16


class AnyADConfig(_Strict):
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    teacher: TeacherConfig = Field(default_factory=TeacherConfig)
    inp: InpConfig = Field(default_factory=InpConfig)
    decoder: DecoderConfig = Field(default_factory=DecoderConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    score: ScoreConfig = Field(default_factory=ScoreConfig)


# ============================================================================
# Dataset records
# ============================================================================


class SampleRecord(BaseModel):
    """One slice sample as listed in a manifest"""

    id: str
    blob: str
    mask: Optional[str] = None
    label: Literal["normal", "abnormal"]
    split: Literal["train", "test"]
    volume: Optional[str] = None
    slice_index: Optional[int] = None


class Manifest(BaseModel):
    """Dataset manifest: channel order, samples, split counts"""

    modalities: list[str] = Field(default_factory=lambda: list(MODALITY_NAMES))
    samples: list[SampleRecord] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check(self) -> "Manifest":
        ids = [s.id for s in self.samples]
        if len(ids) != len(set(ids)):
            raise ValueError("sample ids must be unique")
        bad = [s.id for s in self.samples if s.split == "train" and s.label != "normal"]
        if bad:
            raise ValueError(f"train split must contain only normal samples, got {bad[:3]}")
        return self

    @property
    def counts(self) -> dict[str, int]:
        counts = {"train": 0, "test_normal": 0, "test_abnormal": 0}
        for sample in self.samples:
            if sample.split == "train":
                counts["train"] += 1
            else:
                counts[f"test_{sample.label}"] += 1
        return counts

    def split(self, name: str) -> list[SampleRecord]:
        return [s for s in self.samples if s.split == name]


# ============================================================================
# Reports
# ============================================================================


class StepReport(BaseModel):
    """Losses and gradient norm of one optimization step"""

    step: int
    total: float
    rec: float
    con: float
    dist: float
    grad_norm: float
    lr: float


class ComboMetrics(BaseModel):
    auroc_img: float
    auroc_px: float
    ap_img: float
    ap_px: float
    f1_img: float
    f1_px: float
    aupro: float
