"""subnetlab: language-specific subnetwork experiments at desk scale."""

from .autodiff import Tensor, backward, grad_check
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, parse_config
from .ctc import ctc_loss, greedy_decode
from .metrics import cer, edit_distance
from .model import EncoderConfig, forward, init_model
from .optim import AdamHyper, AdamState, adam_step
from .params import ParameterTree
from .pipeline import (ExperimentSpec, GridContext, RunResult, TrainConfig,
                       avg_downstream_language, avg_subnetwork_performance,
                       derive_subnetwork, downstream_finetune, evaluate,
                       pretrain_base, run_grid, upstream_finetune)
from .pruning import apply_mask, global_l1_prune, iou, mask_sparsity, union_mask
from .synthlang import (CorpusSpec, LanguageSpec, Utterance, build_corpus,
                        make_language, sample_text, synth_frames)

__version__ = "0.1.0"
