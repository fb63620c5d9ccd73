"""Adversarial attacks and Grad-CAM explanations on a small numpy CNN.

Submodules:

- ``autodiff``: reverse-mode automatic differentiation over numpy arrays
- ``model``: the surrogate classifier, training and weight files
- ``attacks``: L-BFGS, FGSM, C&W, BIM, PGD, one-pixel and universal perturbations
- ``gradcam``: saliency maps and explanation panels
- ``data``, ``images``: datasets, YOLO-style labels and PPM images
- ``harness``, ``cli``: experiment configs and the command-line verbs
"""

from .attacks import AttackConfig, AttackResult, run_attack
from .data import DatasetSplit, LabeledExample, load_dataset, synth_signs
from .gradcam import SaliencyMap, explanation_triptych, gradcam
from .model import (
    Model,
    ModelConfig,
    Prediction,
    TrainConfig,
    evaluate,
    load_weights,
    predict,
    save_weights,
    train,
)

__all__ = [
    "AttackConfig",
    "AttackResult",
    "DatasetSplit",
    "LabeledExample",
    "Model",
    "ModelConfig",
    "Prediction",
    "SaliencyMap",
    "TrainConfig",
    "evaluate",
    "explanation_triptych",
    "gradcam",
    "load_dataset",
    "load_weights",
    "predict",
    "run_attack",
    "save_weights",
    "synth_signs",
    "train",
]
