"""AERO: two-stage anomaly detection for multivariate star-magnitude series.

Stage 1 reconstructs each variate from its own temporal context with a shared
Transformer encoder-decoder; stage 2 builds a per-window similarity graph
over the stage-1 errors and reconstructs concurrent noise from the other
variates, so correlated noise is explained away while genuine anomalies are
not. Scores are thresholded with a peaks-over-threshold tail fit.
"""

from .data import (DataError, NormStats, ObservationFrame, WindowInstance,
                   apply_normalize, fit_normalize, invert_normalize, load_csv,
                   make_windows, save_csv)
from .detection import (PotThreshold, ScoreSeries, label, pot_fit,
                        pot_fit_per_variate, save_threshold_report,
                        score_stream)
from .evaluation import (ABLATION_VARIANTS, Metrics, PipelineResult, Segment,
                         extract_segments, format_metrics, point_adjust, prf,
                         run_ablation, run_pipeline)
from .nn import GradientError, Tensor, grad_check, no_grad
from .noisegraph import (NoiseModule, WindowGraph, gcn_reconstruct,
                         graph_messages, stage2_forward, window_graph)
from .synth import (PRESETS, AnomalyEvent, GenerationError, GenSpec,
                    NoiseEvent, Preset, gen_basic, gen_dataset, inject_anomalies,
                    inject_noise)
from .temporal import (TemporalModule, TimeEmbeddingParams, decode, encode,
                       forward_window_batch, reconstruct, time_embedding)
from .training import (TrainConfig, TrainReport, hold_out_split,
                       stage1_outputs, train_stage1, train_stage2)

__version__ = "0.1.0"

__all__ = [
    "ABLATION_VARIANTS", "AnomalyEvent", "DataError", "GenSpec",
    "GenerationError", "GradientError", "Metrics", "NoiseEvent", "NoiseModule",
    "NormStats", "ObservationFrame", "PRESETS", "PipelineResult",
    "PotThreshold", "Preset", "ScoreSeries", "Segment", "TemporalModule",
    "Tensor", "TimeEmbeddingParams", "TrainConfig", "TrainReport",
    "WindowGraph", "WindowInstance", "apply_normalize", "decode", "encode",
    "extract_segments", "fit_normalize", "format_metrics",
    "forward_window_batch", "gcn_reconstruct", "gen_basic", "gen_dataset",
    "grad_check", "graph_messages", "hold_out_split", "inject_anomalies",
    "inject_noise", "invert_normalize", "label", "load_csv", "make_windows",
    "no_grad", "point_adjust", "pot_fit", "pot_fit_per_variate", "prf",
    "reconstruct", "run_ablation", "run_pipeline", "save_csv",
    "save_threshold_report", "score_stream", "stage1_outputs",
    "stage2_forward", "time_embedding", "train_stage1", "train_stage2",
    "window_graph",
]
