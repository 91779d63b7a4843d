"""Character-aware diffusion training at desk scale.

Three mechanisms around a miniature text-conditioned diffusion model:
character-level prompt enhancement, a cross-attention localization loss,
and self-play preference fine-tuning, plus the synthetic design-image
corpus and metric suite needed to exercise them end to end.
"""

from .data import (
    CharacterMaskSet,
    ConstantScorer,
    DesignSample,
    FilterConfig,
    assemble_caption,
    connected_component_masks,
    filter_sample,
    render_sample,
)
from .losses import (
    CharLossInputs,
    DPOBatch,
    char_localization_loss,
    denoise_loss,
    downsample_mask,
    dpo_loss,
    total_stage1_loss,
)
from .metrics import (
    FeatureStats,
    extract_feature_stats,
    frechet_distance,
    ned_similarity,
    ocr_metrics,
)
from .model import (
    ConditioningSequence,
    CrossAttentionRecord,
    DiffusionModel,
    ModelConfig,
    combine_guidance,
    condition_dropout,
    load_checkpoint,
    save_checkpoint,
)
from .recognizer import RecognitionResult, TemplateRecognizer, recognize_template
from .schedule import NoiseSchedule, make_schedule, q_sample
from .spdpo import (
    PreferencePair,
    SPDPOConfig,
    build_pairs,
    dpo_finetune,
    generate_candidates,
    score_text_accuracy,
)
from .vocab import (
    CharToken,
    CharVocabulary,
    EnhancedPrompt,
    build_vocabulary,
    enhance_prompt,
    extract_render_words,
)

__version__ = "0.1.0"
