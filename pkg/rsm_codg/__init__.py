"""
RSM-CoDG Package

Cross-subject EEG emotion recognition on differential-entropy features:
per-subject input alignment, region-aware spatial attention, multi-scale
masked temporal attention and domain-generalisation losses, evaluated
leave-one-subject-out on a numpy autodiff engine.
"""

__version__ = "0.1.0"

# Package-level imports for convenience
from .config_manager import ConfigurationManager
from .dataio import load_dataset, save_dataset, synthesize
from .loso_orchestrator import LosoOrchestrator, loso_run
from .models import Dataset, FoldReport, SynthSpec, TrainConfig
from .network import RsmCodgNetwork

__all__ = [
    "ConfigurationManager",
    "LosoOrchestrator",
    "loso_run",
    "RsmCodgNetwork",
    "Dataset",
    "FoldReport",
    "SynthSpec",
    "TrainConfig",
    "load_dataset",
    "save_dataset",
    "synthesize",
]
