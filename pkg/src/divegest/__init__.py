"""Underwater diver gesture recognition with built-in interpretability.

A small residual CNN trained from scratch on f64 tensors, explained with
integrated gradients and occlusion sensitivity, and applied to ordered
frame streams with rolling-average smoothing.
"""

from divegest.dataset import (CADDY_CLASSES, ClassVocab, Manifest, SyntheticSpec,
                              load_dataset, load_image, load_manifest, split,
                              synth_generate)
from divegest.explain import (AttributionMap, Heatmap, IgConfig, OcclusionConfig,
                              integrated_gradients, occlusion_map, render_heatmap)
from divegest.model import (TINY_RESNET_CONFIG, ModelGraph, build_model, forward,
                            freeze_mask, load_checkpoint, predict, save_checkpoint)
from divegest.stream import (AnnotatedFrame, RollingWindow, classify_stream,
                             count_switches, push_frame)
from divegest.train import (AdamState, AugmentConfig, StepLrSchedule, TrainReport,
                            adam_step, augment, evaluate, lr_at, train)

__version__ = "0.1.0"
