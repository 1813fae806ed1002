"""Monte Carlo dropout UNet segmentation with per-pixel entropy uncertainty."""
from .data import SegDataset, SegItem, SynthConfig, generate_synthetic, load_dataset, split
from .metrics import binarize, dice, summarize
from .tensor import Tensor, backward, grad_check, no_grad, tensor_create
from .training import TrainConfig, TrainHistory, augment, bce_loss, train
from .uncertainty import (McPrediction, aleatoric_uncertainty, epistemic_uncertainty, mc_predict,
                          mc_sample, model_uncertainty_score, pixel_entropy, predictive_entropy)
from .unet import ModelGraph, UNetConfig, build_unet, forward_seg, load_checkpoint, param_count, save_checkpoint

__version__ = "0.1.0"
