"""Two-gap unsupervised domain adaptation for object detection.

The clear-to-adverse-weather domain gap is treated as two parts with
distinct remedies: a style gap, aligned adversarially on gated feature
statistics, and a weather gap, closed by contrastive learning on
clean/corrupted instance pairs.  Ships with a synthetic clear/adverse
detection benchmark, a minimal anchor-free detector, training/evaluation
tooling, a CLI, and an sklearn-style estimator.
"""

from .corruption import (
    CorruptionRecord,
    ParameterError,
    StyleConfig,
    StyleParams,
    WeatherConfig,
    WeatherParams,
    apply_fog,
    apply_rain,
    apply_snow,
    apply_style,
    corrupt,
)
from .scenes import (
    BoundingBox,
    ConfigError,
    CorruptionConfig,
    GenConfig,
    LabeledImage,
    SceneSpec,
    build_dataset,
    load_split,
    render,
    sample_scene,
)
from .detector import (
    Detection,
    FeatureMap,
    RawPredictions,
    assign_targets,
    decode,
    detection_loss,
    nms,
)
from .style_align import (
    StyleAttention,
    StyleDiscriminator,
    adversarial_style_loss,
    grl,
    grl_lambda,
    style_stats,
)
from .weather_contrast import (
    InstanceFeature,
    ProjectionHead,
    info_nce,
    make_views,
    pool_instance,
    weather_alignment_loss,
)
from .model import AdaptiveDetector, ModelConfig, build_model
from .trainer import MODES, LabelLeakError, TrainConfig, Trainer, TrainingDiverged, pseudo_boxes, train
from .evaluator import (
    EvalReport,
    average_precision,
    compare,
    evaluate,
    evaluate_detections,
    iou,
    match,
)
from .config import EvalConfig, RunConfig, SplitSizes, load_run_config
from .estimator import WeatherGapDetector, check_boxes_list, check_image_array

__version__ = "0.1.0"
