"""Diffusion-based acoustic model with cross-speaker / cross-lingual
emotion transfer, built around a synthetic corpus with known latent
factors so every mechanism is testable by oracle."""

from .config import (
    Config,
    CorpusConfig,
    EvalConfig,
    ModelConfig,
    ScheduleConfig,
    TrainConfig,
    load_config,
    paper_scale_model,
    save_config,
)
from .corpus import (
    Corpus,
    EmotionCategories,
    LatentSignatures,
    Utterance,
    generate_corpus,
    load_manifest,
    load_signatures,
    read_mel,
    save_manifest,
    save_signatures,
    write_mel,
)
from .diffusion import (
    DiffusionSchedule,
    ScoreNetwork,
    SpeakerTable,
    diffusion_loss,
    forward_marginal,
    reverse_ode_sample,
    reverse_sde_sample,
    true_conditional_score,
)
from .emotion import (
    EmbeddingSpeakerHead,
    EmotionClassifierHead,
    ReferenceEncoder,
    edm_loss,
    orthogonal_projection_loss,
)
from .text_prior import (
    ContentClassifier,
    DurationPredictor,
    EmotionalAdaptor,
    SpeakerAdversarialHead,
    TextEncoder,
    duration_loss,
    length_regulate,
    prior_loss,
    prior_mel_loss,
)
from .training import (
    TrainState,
    TtsModel,
    build_state,
    load_checkpoint,
    run_training,
    save_checkpoint,
    synthesize,
    total_loss,
    train_step,
)

__version__ = "0.1.0"
