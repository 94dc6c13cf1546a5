"""Continual pre-training with experience replay and Reptile meta-updates at desk scale."""
from .buffer import BufferConfig, ReplayBuffer
from .engine import TrainConfig, compose_batch, joint_train, reptile_update, train
from .metrics import MetricsLog, fit_power_law, forgetting_score, learned_loss, retained_loss
from .model import ModelDims, ModelParams, init_params, loss, loss_and_grad
from .optim import ScheduleConfig, adamw_step, lr_at
from .stream import TaskSpec, TaskStream, make_task, next_incoming, sample_sequences

__version__ = "0.1.0"
