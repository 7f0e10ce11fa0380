"""Energy-efficient MISO beamforming via a transformer-encoder / KAN-decoder
network, trained unsupervised, with near-optimal oracles and an experiment
harness."""

from .autodiff import Tape, Tensor
from .model import (
    BeamformingModel,
    ModelConfig,
    ParameterSet,
    PlainMlpModel,
    load_checkpoint,
    save_checkpoint,
)
from .sysmodel import (
    BeamformingMatrix,
    ChannelSample,
    SystemConfig,
    energy_efficiency,
    generate_rayleigh,
    rate,
    read_dataset,
    scale_to_budget,
    write_dataset,
)
from .training import TrainConfig, fine_tune, he_init, loss, train

__version__ = "0.1.0"
