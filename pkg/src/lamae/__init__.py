"""Multi-lead masked autoencoders with latent attention, on a small numpy autodiff core."""

from .dataio import STANDARD_LEADS, EcgRecord, expand_icd, normalize_icd, read_record, write_record
from .evaluate import ProbeResult, auroc, finetune, label_efficiency_sweep, train_linear_probe
from .model import ModelConfig, embed, forward_pretrain, init_params
from .synthgen import DipoleConfig, synth_dataset, synth_dipole
from .train import Checkpoint, TrainConfig, load_checkpoint, pretrain, save_checkpoint

__all__ = [
    "STANDARD_LEADS", "EcgRecord", "expand_icd", "normalize_icd", "read_record", "write_record",
    "ProbeResult", "auroc", "finetune", "label_efficiency_sweep", "train_linear_probe",
    "ModelConfig", "embed", "forward_pretrain", "init_params",
    "DipoleConfig", "synth_dataset", "synth_dipole",
    "Checkpoint", "TrainConfig", "load_checkpoint", "pretrain", "save_checkpoint",
]
__version__ = "0.1.0"
