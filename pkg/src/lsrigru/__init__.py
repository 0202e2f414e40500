"""Stock trend model built on long/short relationship graphs, a graph-attention
encoder and a relation-augmented GRU, with training and backtesting tools."""

__version__ = "0.1.0"

from .backtest import BacktestLedger, MetricReport, compute_metrics, run_bhs
from .errors import (ArgumentError, ConfigurationError, DataError, LsrigruError,
                     NumericError, ParseError, ValidationError)
from .gat import GatLayerParams, attention_coefficients, encode, gat_layer
from .igru import HeadParams, HiddenState, IgruCellParams, cell_step, loss, predict, unroll
from .marketdata import (FeaturePanel, LabelPanel, Universe, compute_labels,
                         ingest_csv, normalize, synth_universe)
from .model import ModelConfig, ModelParams, SequenceSample
from .relgraph import (EdgeSet, RelationMatrix, build_long_matrix,
                       build_short_matrix, to_edge_set)
from .train import (AdamState, PanelContext, TrainConfig, ablation_wire, adam_step,
                    load_checkpoint, save_checkpoint, split_chronological, train_epochs)

__all__ = [name for name in dir() if not name.startswith("_")]
