"""
Named experiment presets: override sets applied on top of config.toml.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, TypedDict


class DatasetSpec(TypedDict):
    """Synthetic profiles a preset trains on."""
    profiles: List[str]


class ExperimentType(Enum):
    """Experimental axis a preset varies."""
    STRATEGY = "strategy"
    GRANULARITY = "granularity"
    TASK_ORDER = "task_order"
    LOSS = "loss"
    OUTPUT_FORMAT = "output_format"
    ARCHITECTURE = "architecture"


@dataclass
class Experiment:
    """Experiment preset."""
    name: str
    description: str
    type: ExperimentType
    overrides: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    datasets: Optional[DatasetSpec] = None

    def config_overrides(self) -> Dict[str, Dict[str, Any]]:
        """Section overrides including the preset name and dataset profiles."""
        merged = {section: dict(values) for section, values in self.overrides.items()}
        merged.setdefault("experiment", {})["name"] = self.name
        if self.datasets is not None:
            merged.setdefault("data", {})["profiles"] = list(self.datasets["profiles"])
        return merged


HETEROGENEOUS: DatasetSpec = {"profiles": ["emilya-like", "kdae-like", "egbm-like"]}

EXPERIMENTS: Dict[str, Experiment] = {
    # 1. Joint vs separate training over three joint topologies
    "joint": Experiment(
        name="joint",
        description="One shared model over all three datasets through unified tokens",
        type=ExperimentType.STRATEGY,
        overrides={"experiment": {"strategy": "joint"}},
        datasets=HETEROGENEOUS,
    ),
    "separate": Experiment(
        name="separate",
        description="One model per dataset",
        type=ExperimentType.STRATEGY,
        overrides={"experiment": {"strategy": "separate"}},
        datasets=HETEROGENEOUS,
    ),

    # 2. Token granularity
    "semantic_tokens": Experiment(
        name="semantic_tokens",
        description="Only the pooled semantic token reaches the decoder",
        type=ExperimentType.GRANULARITY,
        overrides={"experiment": {"granularity": "semantic"}},
    ),
    "spatial_tokens": Experiment(
        name="spatial_tokens",
        description="Per-joint spatial tokens only",
        type=ExperimentType.GRANULARITY,
        overrides={"experiment": {"granularity": "spatial"}},
    ),
    "temporal_tokens": Experiment(
        name="temporal_tokens",
        description="Per-frame temporal tokens only",
        type=ExperimentType.GRANULARITY,
        overrides={"experiment": {"granularity": "temporal"}},
    ),
    "spatiotemporal_tokens": Experiment(
        name="spatiotemporal_tokens",
        description="Semantic, spatial and temporal tokens together",
        type=ExperimentType.GRANULARITY,
        overrides={"experiment": {"granularity": "spatiotemporal"}},
    ),

    # 3. Task order and forgetting
    "description_first": Experiment(
        name="description_first",
        description="Description fine-tuning before recognition (D->R)",
        type=ExperimentType.TASK_ORDER,
        overrides={"experiment": {"order": "D->R"}},
    ),
    "recognition_first": Experiment(
        name="recognition_first",
        description="Recognition fine-tuning before description (R->D); recognition is expected to degrade",
        type=ExperimentType.TASK_ORDER,
        overrides={"experiment": {"order": "R->D"}},
    ),

    # 4. Pretraining loss ablation
    "loss_ce": Experiment(
        name="loss_ce",
        description="Cross-entropy only",
        type=ExperimentType.LOSS,
        overrides={"experiment": {"loss": "ce"}},
    ),
    "loss_se": Experiment(
        name="loss_se",
        description="Cross-entropy plus semantic-token contrastive loss",
        type=ExperimentType.LOSS,
        overrides={"experiment": {"loss": "ce+se"}},
    ),
    "loss_st": Experiment(
        name="loss_st",
        description="Cross-entropy plus spatial/temporal contrastive loss",
        type=ExperimentType.LOSS,
        overrides={"experiment": {"loss": "ce+st"}},
    ),
    "loss_all": Experiment(
        name="loss_all",
        description="Cross-entropy with both contrastive losses",
        type=ExperimentType.LOSS,
        overrides={"experiment": {"loss": "ce+se+st"}},
    ),

    # 5. Output format of the recognition answer
    "format_a": Experiment(
        name="format_a",
        description="Answer is the bare label",
        type=ExperimentType.OUTPUT_FORMAT,
        overrides={"experiment": {"output_format": "A"}},
    ),
    "format_b": Experiment(
        name="format_b",
        description="Answer is 'This is a/an <emotion> person.'",
        type=ExperimentType.OUTPUT_FORMAT,
        overrides={"experiment": {"output_format": "B"}},
    ),
    "format_c": Experiment(
        name="format_c",
        description="Answer is the long skeleton-sequence sentence",
        type=ExperimentType.OUTPUT_FORMAT,
        overrides={"experiment": {"output_format": "C"}},
    ),

    # 6. Architecture choices
    "unfrozen_encoder": Experiment(
        name="unfrozen_encoder",
        description="Skeleton encoder keeps training during fine-tuning",
        type=ExperimentType.ARCHITECTURE,
        overrides={"encoder": {"frozen": False}},
    ),
    "deep_projection": Experiment(
        name="deep_projection",
        description="Three-layer projection into the decoder space",
        type=ExperimentType.ARCHITECTURE,
        overrides={"finetune": {"projection_depth": 3}},
    ),
    "frozen_decoder": Experiment(
        name="frozen_decoder",
        description="No LoRA adapters; only the projection is trained",
        type=ExperimentType.ARCHITECTURE,
        overrides={"finetune": {"decoder_mode": "frozen"}},
    ),
}


def get_experiment(name: str) -> Optional[Experiment]:
    """Get a predefined experiment by name."""
    return EXPERIMENTS.get(name)


def list_experiments() -> List[str]:
    """List all available experiments."""
    return list(EXPERIMENTS.keys())


def get_experiment_overrides(experiment_name: str) -> Dict[str, Dict[str, Any]]:
    """
    Get the config overrides of a named experiment.

    Args:
        experiment_name: Name of the experiment

    Returns:
        Section -> key -> value overrides, empty if the name is unknown
    """
    experiment = get_experiment(experiment_name)
    if not experiment:
        return {}
    return experiment.config_overrides()
