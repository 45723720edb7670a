"""Feed-forward stylized novel-view synthesis, desk scale.

A transformer-based multi-view backbone renders novel views from a handful
of posed source images; a hypernetwork conditioned on a style latent
generates an intermediate MLP that re-styles ray features, trained with
content, style, and flow-based multi-view consistency losses.
"""

from .backbone import Backbone, BackboneConfig, project_point, sample_ray
from .errors import (ConsistencyError, FormatError, StateError,
                     StylefieldError, ValidationError)
from .flowwarp import estimate_flow_naive, visibility_mask, warp
from .losses import (FeatureExtractor, IdentityExtractor, LossWeights,
                     consistency_loss, content_loss, style_loss, total_loss)
from .metrics_eval import consistency_scores, eval_report
from .scene_io import (Camera, FlowField, SceneBundle, StyleImage, SynthSpec,
                       VisibilityMask, load_scene, load_style_set, read_flo,
                       save_scene, split_styles, synth_scene, synth_styles,
                       write_flo)
from .stylizer import (HyperNetParams, StyleLatent, StylizedMLP,
                       StylizerConfig, apply_stylized, encode_style,
                       hyper_generate, init_hypernet, stylize_render,
                       train_style_vae)
from .trainer import (TrainConfig, load_config, pretrain_geometry, psnr,
                      train_stylization)
