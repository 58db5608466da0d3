"""Online prototype memory learned from non-iid streams, with a small tape autodiff."""

from .encoder import EncoderConfig, ParameterSet, encode, encode_batch, init_params
from .memory import MemoryConfig, PrototypeMemory, create_prototype, e_step, m_step, step
from .objective import LossConfig, episode_loss, loss_and_grad
from .streams import EpisodeSource, StreamConfig, generate_episode
from .trainer import TrainConfig, evaluate, grad_check, train

__version__ = "0.1.0"
