"""Transfer-learning robustness bench.

Train small CNN classifiers under three weight-transfer strategies
(scratch, fine-tune, common init), attack them with single-step
gradient-sign perturbations in white-box and query-free black-box
modes, and measure adversarial accuracy, attack transferability, and
input-gradient-norm diagnostics.  Fully deterministic given a seed.
"""

from .attack import (
    AdversarialBatch,
    AttackSpec,
    EmptySubsetError,
    LabelSpaceError,
    attack_black_box,
    attack_white_box,
    fgsm,
    fgsm_step,
    input_gradient,
)
from .data import (
    DomainStyle,
    LabeledDataset,
    STYLE_PRESETS,
    load_idx,
    partition,
    subsample,
    synth_domain,
    train_val_split,
)
from .experiment import (
    ConfigError,
    ExperimentConfig,
    derive_seed,
    parse_config,
    run_seed,
)
from .metrics import (
    AttackReport,
    GammaUndefinedError,
    GradNormHistogram,
    adversarial_accuracy,
    compile_report,
    gradient_norm_histogram,
    transferability_gamma,
)
from .model import (
    Model,
    accuracy,
    build_dtn,
    forward,
    load_checkpoint,
    model_id,
    predict,
    reinit_classifier_head,
    save_checkpoint,
)
from .tensor import GradientTape, Tensor, backward
from .training import (
    TrainConfig,
    TrainedModel,
    run_common_init,
    run_finetune,
    run_scratch,
    train,
)

__version__ = "0.1.0"
