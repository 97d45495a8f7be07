"""cpdnet: a desk-scale salient-object-detection stack built from scratch —
NCHW tensors with tape-based reverse-mode autodiff, a bifurcated two-branch
encoder with partial decoders and holistic attention, Adam training,
synthetic scene data, saliency metrics, and an analytical FLOP cost model.
"""

from . import backend
from .tensor import (Tensor, Tape, ShapeError, GradCheckReport, activation, add,
                     backward, concat_channels, conv2d, elementwise, grad_check,
                     maximum, maxpool2, mul, pad_replicate, reduce_sum, relu,
                     scale, sigmoid, upsample_bilinear)
from .layers import (ConvLayer, GaussianBlurLayer, blur_geometry_for_side,
                     even_same_padding, init_conv, init_gaussian_kernel,
                     minmax_normalize)
from .model import (FULL_DECODER, CpdModel, ModelConfig, SaliencyOutputs,
                    backbone_forward, branch_forward, context_forward, cpd_forward,
                    decode, fuse_levels, holistic_attention)
from .training import (AdamState, Checkpoint, TrainConfig, adam_step,
                       bce_with_logits, fit, load_checkpoint, model_from_checkpoint,
                       restore_into, save_checkpoint, total_loss)
from .data import (Sample, SceneConfig, load_manifest, read_pgm, read_ppm,
                   synth_dataset, synth_sample, write_dataset, write_pgm, write_ppm)
from .metrics import (MetricReport, ber, dataset_mae, evaluate_dataset,
                      f_measure_curve, iou, mae, mean_iou)
from .costmodel import CostModel, compare, model_cost

__version__ = "0.1.0"
