"""Box-supervised camouflaged-object segmentation.

Pseudo-labels from box prompts, box-count consistency filtering,
redundancy refinement against network predictions, and a mask-guided
segmentation network with training, evaluation, and a CLI.
"""

from .data import (BBox, ComponentLabeling, DatasetManifest, ImageSample,
                   ManifestEntry, MaskMap, MaskRole, boxes_from_mask,
                   connected_components, count_boxes, is_binary, load_image,
                   load_mask, merge_overlapping_boxes, save_image, save_mask)
from .errors import (BoxSAMError, ChecksumError, ConfigError, DataError,
                     NumericError, UndefinedMetricError)
from .loss import (LossBreakdown, pixel_weight, total_loss, weighted_bce,
                   weighted_iou)
from .metrics import (MetricReport, dice_iou, e_measure_mean, evaluate_dirs,
                      evaluate_pair, evaluate_pairs, f_adaptive, mae,
                      s_measure)
from .mgnet import (CBAM, ExternalFeatureAdapter, FeaturePyramid, MGNet,
                    MGNetConfig, MGNetOutputs, TinyPyramidEncoder,
                    build_mgnet, count_parameters, seed_everything,
                    upsample_to)
from .pseudolabel import (ExternalMaskLoader, NoiseSpec, OracleSegmenter,
                          PipelineConfig, PipelineResult, PromptableSegmenter,
                          RpsReport, RpsSpec, SegmenterSpec,
                          generate_initial_pseudolabels,
                          partition_by_box_count, redundancy_process,
                          run_boxsam)
from .synth import SynthConfig, generate, render_sample
from .train import (TrainConfig, TrainResult, load_checkpoint, lr_for_epoch,
                    predict, predict_array, save_checkpoint, train)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
