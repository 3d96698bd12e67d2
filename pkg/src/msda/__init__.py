"""Multi-source domain adaptation for binary text classification.

Mixture-of-experts prediction mixing (averaging, fine-tuned static weights,
domain-classifier attention, learned dot-product attention), gradient-
reversal domain-adversarial training, an episodic meta-target training
engine, and a leave-one-out evaluation harness with agreement and
representation analyses.
"""

from .adversarial import DomainAdvBranch, domain_adv_loss, grl_backward, grl_forward
from .analysis import krippendorff_alpha, pairwise_agreement, pca_project
from .config import (
    AdversarialConfig,
    ConfigError,
    MixingConfig,
    RunConfig,
    TrainConfig,
    load_run_config,
    parse_variant,
)
from .data import (
    DataError,
    DatasetBundle,
    Example,
    ParseError,
    ValidationError,
    holdout,
    load_canonical,
    train_val_split,
    write_canonical,
)
from .encoders import (
    EncoderConfig,
    EncoderError,
    EncoderOutput,
    TextEncoder,
    build_encoder,
    layer_representation,
    register_external_backbone,
    tokenize,
)
from .evaluation import (
    ConfusionCounts,
    LooResult,
    RunReport,
    accuracy,
    f1,
    loo_run,
    threshold_predict,
)
from .mixing import (
    GLOBAL,
    AttentionParams,
    ExpertBank,
    MixWeights,
    attention_weights,
    domain_classifier_weights,
    finetune_average_search,
    mix_average,
    mix_domain_classifier,
    mix_weighted,
    uniform_weights,
)
from .synth import synthetic_bundle
from .training import (
    Episode,
    TrainedModel,
    binary_cross_entropy,
    load_run,
    meta_source_loss,
    meta_target_loss,
    save_run,
    schedule,
    total_loss,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]

__version__ = "0.1.0"
