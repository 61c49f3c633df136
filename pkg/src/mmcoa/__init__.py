"""Multimodal contrastive adversarial training for dual-encoder vision-language models."""

from ._util import TOOL_VERSION as __version__
from .attacks import (
    RETRIEVAL_BUDGET,
    TEST_BUDGET,
    TRAIN_BUDGET,
    AdversarialBudget,
    AttackError,
    AttackResult,
    SubstitutionTable,
    co_attack,
    multimodal_attack,
    pgd_image_attack,
    text_attack,
)
from .encoders import (
    DualEncoder,
    LinearDualEncoder,
    PromptSet,
    ToyDualEncoder,
    Vocabulary,
    build_prompts,
    embed_images,
    embed_texts,
    load_checkpoint,
    save_checkpoint,
)
from .evaluation import (
    EvalReport,
    eval_in_distribution,
    eval_retrieval,
    eval_robust_accuracy,
    eval_zero_shot_protocol,
    interpolate_weights,
)
from .losses import (
    LossWeights,
    loss_image_adv_text_clean,
    loss_text_adv_image_clean,
    total_loss,
    zero_shot_predict,
)
from .seeding import derive_seed
from .training import TrainConfig, train, train_ft_standard, train_mmcoa, train_tecoa
