"""Meta ordinal weighting network: bilevel per-class sample reweighting for
ordinal classification, built on a small reverse-mode autodiff engine."""

from .autodiff import (GradMap, ParamSet, Tensor, backward, constant,
                       forward_eval, grad_check, leaf)
from .checkpoint import load_checkpoint, save_checkpoint
from .datasynth import (Dataset, OrdinalSample, SynthConfig, bin_score, generate,
                        load_dataset, save_dataset, split_train_test)
from .errors import (CapacityError, ContractError, FormatError, MownetError,
                     NumericError, ShapeError)
from .metrics import (ClassReport, ConfusionMatrix, dump_embeddings, evaluate,
                      summarize_weight_trajectory)
from .model import (BackboneSpec, Prediction, WeightNetSpec, WeightVector,
                    forward_backbone, forward_weightnets, init_backbone,
                    init_weightnets, predict_batch, predict_class)
from .mos import MetaOrdinalSet, PerClassLossVector, mce_loss, meta_class_losses, sample_mos
from .optim import AdamState, adam_step, sgd_step
from .trainer import (StepTrace, TrainConfig, TrainResult, phi_update,
                      theta_update, train, train_ce_baseline, virtual_step)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
