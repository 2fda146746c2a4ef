"""Difficulty-conditioned training-data synthesis.

Pipeline: score per-sample difficulty with a frozen baseline classifier,
fine-tune a conditional diffusion model whose denoising condition appends a
learned difficulty embedding to the prompt embedding, generate images at
commanded difficulty levels, and evaluate both controllability and the
training value of the synthetic data.
"""

from .conditioning import (
    Condition,
    DifficultyEncoder,
    PromptEmbedder,
    Vocabulary,
    build_condition,
    build_condition_difficulty_only,
    create_difficulty_encoder,
    embed_prompt,
    encode_difficulty,
    null_condition,
)
from .config import RunConfig
from .dataset import (
    DatasetManifest,
    DifficultySample,
    LabeledImage,
    load_dataset,
    save_dataset,
)
from .diffusion import (
    NoiseSchedule,
    TrainConfig,
    diffusion_loss,
    finetune_with_difficulty,
    forward_noise,
    predict_noise,
    pretrain_base,
)
from .errors import (
    ConfigError,
    DependencyError,
    HardgenError,
    IntegrityError,
    InvariantViolation,
    NumericError,
    TrainingDivergence,
)
from .experiments import (
    ExperimentReport,
    ablation_sweep,
    assess_generated,
    dilemma_experiment,
    distribution_experiment,
    feature_projection,
    hard_factor_generation,
)
from .kde import DensityCurve, kde, silverman_bandwidth
from .lora import AdapterSet, LoraAdapter, create_adapters, effective_weight
from .sampler import SampleRequest, cfg_combine, sample, sample_batch
from .scorer import (
    ClassifierParams,
    ScorerTrainConfig,
    annotate_dataset,
    assess_difficulty,
    assess_difficulties,
    split_by_difficulty,
    train_classifier,
)
from .shapes import Hardness, ShapesConfig, generate_shapes_dataset
from .synthesis import (
    SamplerSettings,
    SynthesisPlan,
    augment,
    sample_difficulty,
    synthesize_dataset,
    synthesize_text_only,
)
from .unet import ConditionalUNet, create_unet

__version__ = "0.1.0"
