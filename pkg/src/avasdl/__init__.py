"""Audio-visual active speaker detection and localization on a 16-mic / 11-camera rig."""

from .features import assemble_features, gcc_phat, log_mel, mel_filterbank, stft
from .metrics import MetricsReport, average_precision, evaluate, precision_recall_curve
from .model import ASDLNet, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .pipeline import RunConfig, load_run_config, run_pipeline
from .rig import RigConfig, build_default_rig, load_rig
from .sim import SceneScript, generate_corpus, render_scene
from .training import TrainConfig, asdl_loss, grad_check, train

__all__ = [
    "ASDLNet", "MetricsReport", "ModelConfig", "RigConfig", "RunConfig", "SceneScript", "TrainConfig",
    "asdl_loss", "assemble_features", "average_precision", "build_default_rig", "build_model", "evaluate",
    "gcc_phat", "generate_corpus", "grad_check", "load_checkpoint", "load_rig", "load_run_config", "log_mel",
    "mel_filterbank", "precision_recall_curve", "render_scene", "run_pipeline", "save_checkpoint", "stft", "train",
]
__version__ = "0.1.0"
