"""Quantised Siamese tracking: integer-exact branch, SiamFC loop, evaluation and accelerator cost model."""
from .boxes import BBox
from .metrics import SequenceResult, iou, mao, run_benchmark
from .perfmodel import FoldingConfig, PerfEstimate, estimate, explore, fit_energy, load_calibration
from .profiling import StageTiming, TimingReport, aggregate_timings
from .qtensor import QTensor, ThresholdSet, conv2d_same, dequantize, maxpool2x2, quantize, threshold_activate
from .siamnet import (
    LayerSpec,
    NetworkSpec,
    SiameseBranch,
    WeightContainer,
    canonical_network,
    forward,
    gen_random_weights,
    load_weights,
    param_count,
    save_weights,
)
from .tracker import TrackerConfig, TrackerState, track_sequence

__version__ = "0.1.0"
