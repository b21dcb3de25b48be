"""Nearest-neighbor meta-representations with a shared pre-trained scorer.

Heterogeneous tabular datasets are mapped into one fixed-width space (the
sorted distances to each instance's nearest neighbors, paired with label
slots), so a single multilayer perceptron can be pre-trained across them and
then applied to an unseen dataset directly or after fine-tuning.
"""

__version__ = "0.1.0"

from .data import (
    DatasetSchema,
    EncodedDataset,
    RawTable,
    SplitIndices,
    encode,
    fit_encoder,
    load_schema,
    load_table,
    prepare,
    split,
)
from .errors import (
    ConfigError,
    CorruptCheckpoint,
    DataError,
    DegenerateDataset,
    DimensionMismatch,
    EmptyContext,
    EmptyCorpus,
    TabMetaError,
)
from .evalbench import knn_predict, make_synthetic_corpus, metrics, run_protocol
from .metarep import build_meta_batch, full_meta_rep, query_topk
from .metric import MetricSpec, metric_specs, mutual_information, weighted_distance
from .model import ScorerParams, forward, init_params, loss_and_grad
from .trainer import (
    PretrainCorpus,
    TrainConfig,
    finetune,
    load_checkpoint,
    predict_batch,
    pretrain,
    save_checkpoint,
)

__all__ = [name for name in dir() if not name.startswith("_")]
