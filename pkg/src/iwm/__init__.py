"""Image World Models at desk scale: a numpy autodiff engine, ViT encoder and
predictor, augmentation-conditioned latent pretraining and its evaluations."""

__version__ = "0.1.0"
