"""Desk-scale class-incremental learning with separated softmax and task-wise distillation."""
from .data import LabeledDataset, load_csv, relabel, split_tasks, standardize, synth_gaussian, write_csv
from .errors import CapacityExhausted, IngestionError, InvalidArgument, InvalidState, NumericFailure
from .eval import EvalReport, average_incremental_accuracy, evaluate, new_data_task_ratio, \
    task_confusion, topk_accuracy
from .layout import TaskLayout, class_ordering
from .losses import LossResult, ce_loss, ce_ss_loss, gkd_loss, ssil_loss, tkd_loss
from .memory import ExemplarMemory, sample_replay, update_memory
from .model import IncrementalClassifier, ModelSnapshot, SGDState, predict_from_logits, sgd_update
from .sampler import Batch, BatchPlan, joint_batches, rp_batches
from .trainer import Method, RunState, TrainConfig, apply_score_correction, balanced_fine_tune, \
    branch_compare, fit_score_correction, learning_rate, run_incremental, train_task

__version__ = "0.1.0"
