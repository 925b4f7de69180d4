"""Adversarially trained blocked-Gibbs transition operators over (x, z)."""

from .chains import (ChainState, JointBatch, TabularModel, check_proposition1, clamped_step, inpaint_chain,
                     tabular_stationary, tabular_transition, unclamped_chain)
from .diffcore import Tape, Tensor, detach, no_grad
from .nets import decode, discriminate, encode, init_params
from .trainer import TrainConfig, train, train_step

__version__ = "0.1.0"
