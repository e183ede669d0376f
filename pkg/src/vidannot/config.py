"""One typed ledger for every pipeline parameter, grouped by stage."""

from __future__ import annotations

from dataclasses import dataclass, field

from .ash import AshConfig
from .assoc import AssocConfig
from .backends import DetectionNoise, MaskGeneratorConfig, PropagationDegradation, SyntheticWorldConfig
from .chunker import ChunkerConfig
from .smart_od import SmartOdConfig


@dataclass(frozen=True)
class DeploymentConfig:
    """Dataset-deployment knobs: objective weighting, validation, QA."""

    alpha_weight: float = 0.5  # recall weight in the detection objective
    gamma: float = 0.9  # cross-validation tolerance
    tau_qa: float = 0.9  # QA mean-IoU floor per sequence
    qa_sample_fraction: float = 0.2
    qa_seed: int = 0
    # Candidate values per SmartOdConfig field for the grid search.
    parameter_grid: dict[str, list] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha_weight <= 1.0:
            raise ValueError(f"alpha_weight out of [0,1]: {self.alpha_weight}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma out of (0,1]: {self.gamma}")
        if not 0.0 < self.tau_qa < 1.0:
            raise ValueError(f"tau_qa out of (0,1): {self.tau_qa}")
        if not 0.0 < self.qa_sample_fraction <= 1.0:
            raise ValueError(f"qa_sample_fraction out of (0,1]: {self.qa_sample_fraction}")


@dataclass(frozen=True)
class PipelineConfig:
    smart_od: SmartOdConfig = field(default_factory=SmartOdConfig)
    assoc: AssocConfig = field(default_factory=AssocConfig)
    ash: AshConfig = field(default_factory=AshConfig)
    chunker: ChunkerConfig = field(default_factory=ChunkerConfig)
    deploy: DeploymentConfig = field(default_factory=DeploymentConfig)
    mask_generator: MaskGeneratorConfig = field(default_factory=MaskGeneratorConfig)
    world: SyntheticWorldConfig | None = None
    noise: DetectionNoise = field(default_factory=DetectionNoise)
    degradation: PropagationDegradation = field(default_factory=PropagationDegradation)
    rescale_confidences: bool = True
    seed: int = 0
