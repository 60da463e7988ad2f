"""Hand-differentiated CNN: layers, network, training loops."""

from .network import Architecture, Network
from .train import (
    Adam,
    MaskConfig,
    Prediction,
    TrainConfig,
    classifier_forward,
    cosine_lr,
    decoder_forward,
    encoder_forward,
    finetune,
    focal_loss,
    loss_and_gradients,
    mse_loss,
    predict,
    predict_proba,
    pretrain,
    random_mask,
    reconstruct,
)
