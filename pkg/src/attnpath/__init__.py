"""Concept-grouped tabular transformers with attention-path explanations.

The package trains a multi-head transformer over a-priori concept
groups of tabular features, distills it into a single-head multi-layer
student with an entropy-penalized loss, and explains predictions by
mapping all attention matrices to a layered DAG and extracting maximum
probability paths -- alongside last-layer attention, gradient saliency,
and Shapley baselines, plus the aggregate comparison machinery.
"""

from .attngraph import (AttentionDag, PathResult, best_groups, build_dag,
                        max_prob_path, path_probability_matrix, scale_unit)
from .data import (TabularDataset, covertype_prepare, load_csv, ni_prepare,
                   synth_planted)
from .explainers import (Explanation, explain_batch, explain_ll, explain_mla,
                         explain_sa, explain_sh)
from .model import (AttentionStack, ConceptTransformer, EncoderWeights,
                    GroupSchema, ModelConfig)
from .training import (RunRecord, TrainConfig, distill_student, distillation_loss,
                       select_lambda, train_teacher)

__version__ = "0.1.0"

__all__ = [
    "AttentionDag", "AttentionStack", "ConceptTransformer", "EncoderWeights",
    "Explanation", "GroupSchema", "ModelConfig", "PathResult", "RunRecord",
    "TabularDataset", "TrainConfig", "best_groups", "build_dag",
    "covertype_prepare", "distill_student", "distillation_loss", "explain_batch",
    "explain_ll", "explain_mla", "explain_sa", "explain_sh", "load_csv",
    "max_prob_path", "ni_prepare", "path_probability_matrix", "scale_unit",
    "select_lambda", "synth_planted", "train_teacher",
]
