"""Closed-loop cardiac rhythm monitoring and timed drug delivery toolkit.

Subpackages map to the stages of the system: `signals` (simulation and
ingestion), `spectro` (Morlet CWT spectrograms), `cnn` + `metrics`
(classifier and evaluation), `pathway` (screening state machine, risk
scores, reports), `dosing` (prescriptions and the safety gate), `pump`
(virtual device), `server` (wire protocol and operator gateway), `loop`
(closed-loop orchestration and audit replay), `cli` (command line).
"""

from .signals import (  # noqa: F401
    ArtifactConfig,
    Channel,
    RhythmClass,
    RRSeries,
    SimConfig,
    WaveformRecord,
    gen_rr,
    inject_artifacts,
    load_waveform_csv,
    rr_to_ecg,
    rr_to_ppg,
    simulate_dataset,
)
from .spectro import MorletParams, Scalogram, cwt, make_scales, morlet  # noqa: F401
from .cnn import Model, TrainConfig, evaluate, forward, init_model, train  # noqa: F401
from .metrics import MetricsReport, metrics_from_confusion, roc_auc  # noqa: F401
from .pathway import (  # noqa: F401
    ChadsVascFactors,
    CircadianProfile,
    DetectionEvent,
    EpisodeLog,
    HasBledFactors,
    Stage,
    circadian_profile,
    predict_window,
    score_cha2ds2_vasc,
    score_has_bled,
)
from .dosing import (  # noqa: F401
    Prescription,
    PrescriptionMode,
    SafetyState,
    authorize_dose,
    schedule_prescription,
    schedule_predictive,
    validate_prescription,
)
from .pump import PumpGeometry, PumpState, VirtualPump, volume_to_steps  # noqa: F401
from .loop import LoopConfig, replay, run_closed_loop  # noqa: F401

__version__ = "0.1.0"
