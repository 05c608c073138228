"""Coupled multi-timescale visuo-motor network trained with leaky BPTT."""
from .codec import PopulationCodec, decode_analog, encode_analog, preprocess_frame, render_retina
from .config import Config, NetworkConfig, load_config, paper_config, tiny_config, toy_config
from .dynamics import activation, activation_derivative, conv_step, dense_step
from .network import (ParameterSet, NetworkState, Trajectory, attach_pretraining_head, build_network,
                      detach_pretraining_head, forward_step, reset_state, run_sequence)
from .training import (bptt, kl_loss, load_checkpoint, pretrain, save_checkpoint, sgd_update,
                       train_coupled)

__version__ = "0.1.0"
