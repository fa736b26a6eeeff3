"""Multi-scale structure detection.

A sliding-window detector that scores the stacked features of all
pyramid levels at each image location jointly, alongside the
single-scale-template and template-pyramid baselines it generalizes.
"""

from .detect import ScoreMap, detect_image, score_baseline, score_mss, score_template_pyramid
from .evaluate import PRCurve, WeightReport, average_precision, scale_spread, template_heatmap, weight_analysis
from .features import FeatureMap, FeaturePyramid, build_pyramid, export_pyramid, extract_hog, import_pyramid, read_window
from .geometry import Box, Detection, PyramidLocation, box_for_scale, map_location, nms, overlap
from .imaging import Image, SceneSpec, generate_scene, load_image, resize, save_pgm
from .labels import SampleLabel, TrainingSample, extract_positives, model_dims, overlap_profile, threshold_profile, virtual_positives
from .learning import MssModel, TrainConfig, joint_feature_map, load_model, save_model, sdca_train, train_ova, train_ssvm
from .training import MiningState, TrainImage, mine_hard_negatives, train_detector

__version__ = "0.1.0"
