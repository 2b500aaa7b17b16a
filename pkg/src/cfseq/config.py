"""Typed experiment configuration with documented defaults."""
from __future__ import annotations

from dataclasses import dataclass, field

from .simkit.ehr import EHRGenConfig
from .simkit.tumor import TumorConfig

ABLATION_FLAGS = ("no_cpc", "no_infomax", "cdc_loss", "no_balancing", "nwj", "mine")


@dataclass
class GeneratorConfig:
    kind: str = "tumor"            # tumor | ehr
    gamma: float = 1.0             # tumor confounding strength
    n_train: int = 1000
    n_val: int = 100
    n_test: int = 500
    max_len: int = 60
    min_len: int | None = None     # None -> tau + 5
    tumor: TumorConfig = field(default_factory=TumorConfig)
    ehr: EHRGenConfig = field(default_factory=EHRGenConfig)


@dataclass
class ModelConfig:
    z_dim: int = 16
    c_dim: int = 16
    r_dim: int = 16
    fc_hidden: int = 16
    plan_hidden: int = 6
    tau: int = 10
    sigma: float = 0.05
    outcome_scaling: str = "std"   # std | cohort
    enc_lr: float = 0.001
    enc_batch_size: int = 256
    enc_max_epochs: int = 100
    enc_patience: int = 100
    enc_min_delta: float = 0.001
    dec_lr: float = 0.01
    finetune_lr_ratio: float = 0.1
    treat_lr: float = 0.01
    treat_momentum: float = 0.9
    dec_batch_size: int = 128
    dec_max_epochs: int = 300
    dec_patience: int = 50
    dec_min_delta: float = 0.001
    origin_fraction: float = 0.10
    weight_decay: float = 0.0
    club_weight: float = 1.0
    grad_clip: float | None = None
    sn_iterations: int = 1
    ablations: tuple = ()
    masked_covariates: tuple = ()

    def has(self, flag: str) -> bool:
        return flag in self.ablations

    @property
    def mi_estimator(self) -> str:
        if self.has("nwj"):
            return "nwj"
        if self.has("mine"):
            return "mine"
        return "infonce"


@dataclass
class RunConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    out_dir: str = "runs"
    workers: int = 1
    eval_chunk: int = 2048


@dataclass
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    run: RunConfig = field(default_factory=RunConfig)
