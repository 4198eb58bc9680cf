"""promptmed: human-in-the-loop medical image annotation on a promptable
segmentation backbone with per-case prompt learning and automatic prompt
generation."""

from .core import (
    ConfusionCounts,
    LabelMask,
    LossConfig,
    SliceImage,
    Volume,
    biased_dice_loss,
    confusion,
    dice,
    mask_to_rle,
    rle_to_mask,
    top_k_components,
)
from .prompts import Box, MaskPrompt, Point, PromptSet
from .backbone import (
    BackboneDescriptor,
    ImageEmbedding,
    MaskPrediction,
    PromptEncoderState,
    ToyConvBackbone,
    default_backbone,
)
from .assist import (
    AssistModel,
    AssistTrainConfig,
    BoxJitterConfig,
    PointSamplingConfig,
    TrainPair,
    eval_boxes,
    eval_composite_active,
    eval_points,
    jitter_box,
    sample_points,
    train_prompt_encoder,
)
from .promptgen import (
    PointClassifier,
    PropagationConfig,
    classify_candidate_points,
    propagate_ensemble,
    propagate_prompts,
    train_point_classifier,
)
from .sapnet import (
    EpisodeSplit,
    FeatureExtractor,
    PositionEncoder,
    PostProcessConfig,
    PrototypeSet,
    SapTrainConfig,
    auto_segment,
    build_feature_extractor,
    compute_prototypes,
    extract_features,
    generate_prompts_from_coarse,
    position_encoding,
    predict_query,
    train_sapnet,
)
from .data import (
    PhantomBody,
    PhantomConfig,
    SliceSelectionPolicy,
    load_case,
    load_manifest,
    make_phantom,
    select_training_slices,
)

__version__ = "0.1.0"
