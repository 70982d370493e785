"""Phylogeny-structured adapter stacks for cross-lingual transfer at desk scale.

A frozen transformer encoder carries per-layer bottleneck adapters arranged
along a language tree (family, genus, language). Adapters are MLM-trained on
single-language batches, a task adapter is trained on one source language on
top of its stack, and the same task adapter is then reused on other languages
by swapping in their stacks.
"""

from .adapters import (
    AdapterBank,
    AdapterChain,
    AdapterParams,
    AdapterSpec,
    ChainError,
    adapter_forward,
    constrained_bottleneck,
    layer_param_count,
    load_bank,
    new_adapter,
    param_count,
    save_bank,
)
from .checkpoint import CheckpointError
from .encoder import (
    Backbone,
    EncoderConfig,
    InputError,
    encoder_forward,
    init_backbone,
    load_backbone,
    mlm_eval_loss,
    mlm_loss,
    mlm_pretrain_backbone,
    save_backbone,
)
from .estimators import PhyloAdapterModel
from .optim import Adam
from .phylogeny import PhyloTree, RoutingError, TreeValidationError, builtin_tree, load_tree, parse_tree, random_tree, route
from .suite import Manifest, ManifestError, SuiteError, load_manifest, parse_manifest, run_experiment_suite
from .tasks import decode_arcs, is_tree, nli_accuracy, pos_f1, uas
from .training import (
    EvalReport,
    StackConfig,
    TaskAdapter,
    TrainConfig,
    assemble_stack,
    evaluate,
    pretrain_joint,
    train_task_adapter,
)

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AdapterBank",
    "AdapterChain",
    "AdapterParams",
    "AdapterSpec",
    "Backbone",
    "ChainError",
    "CheckpointError",
    "EncoderConfig",
    "EvalReport",
    "InputError",
    "Manifest",
    "ManifestError",
    "PhyloAdapterModel",
    "PhyloTree",
    "RoutingError",
    "StackConfig",
    "SuiteError",
    "TaskAdapter",
    "TrainConfig",
    "TreeValidationError",
    "adapter_forward",
    "assemble_stack",
    "builtin_tree",
    "constrained_bottleneck",
    "decode_arcs",
    "encoder_forward",
    "evaluate",
    "init_backbone",
    "is_tree",
    "layer_param_count",
    "load_backbone",
    "load_bank",
    "load_manifest",
    "load_tree",
    "mlm_eval_loss",
    "mlm_loss",
    "mlm_pretrain_backbone",
    "new_adapter",
    "nli_accuracy",
    "param_count",
    "parse_manifest",
    "parse_tree",
    "pos_f1",
    "pretrain_joint",
    "random_tree",
    "route",
    "run_experiment_suite",
    "save_backbone",
    "save_bank",
    "train_task_adapter",
    "uas",
]
