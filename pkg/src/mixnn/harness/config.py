"""Run configuration: defaults, the method table, and JSON round-tripping.

A RunConfig fully describes one training run. The `method` tag picks the
weighting scheme, whether mixing is enabled, and the neighbor-selection
strategy through METHOD_TABLE; the mix policy fields refine how the mixing
coefficient is drawn for methods that mix.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

from ..evaluation import DEFAULT_K_EVAL, ProbeConfig
from ..objective import MixPolicy

#: method -> (weight scheme tag, mixing enabled, neighbor selection strategy)
METHOD_TABLE: dict[str, tuple[str, bool, str]] = {
    "mnn": ("WSE", True, "cosine"),
    "msf": ("MSE", False, "cosine"),
    "byol": ("WSE", False, "none"),
    "mnn_cas": ("CAS", True, "cosine"),
    "mnn_random": ("WSE", True, "random"),
    "mnn_oracle": ("WSE", True, "oracle"),
    "mnn_no_mix": ("WSE", False, "cosine"),
}

AUG_TAGS = ("strong", "weak")


@dataclass
class DatasetSpec:
    """Synthetic labeled dataset: Gaussian latent clusters pushed through a
    fixed random tanh map into the ambient space."""

    n_classes: int = 10
    n_train: int = 5000
    n_test: int = 1000
    ambient_dim: int = 64
    latent_dim: int = 8
    cluster_spread: float = 1.0
    map_seed: int = 7

    def __post_init__(self) -> None:
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.ambient_dim < self.latent_dim:
            raise ValueError("ambient_dim must be >= latent_dim")
        if self.cluster_spread < 0:
            raise ValueError("cluster_spread must be non-negative")


@dataclass
class EvalConfig:
    k_eval: int = DEFAULT_K_EVAL
    probe: ProbeConfig = field(default_factory=ProbeConfig)


@dataclass
class RunConfig:
    """Complete, serializable description of one training run."""

    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    method: str = "mnn"
    k: int = 5
    support_capacity: int = 1024
    batch_size: int = 128
    epochs: int = 50
    warmup_epochs: int = 5
    momentum: float = 0.99
    base_lr: float = 0.06  # nominal; actual lr0 = base_lr * batch_size / 256
    weight_decay: float = 5e-4
    mix: MixPolicy = field(default_factory=MixPolicy)
    cas_gamma: float = 1.0
    aug_student: str = "strong"
    aug_teacher: str = "weak"
    symmetric_loss: bool = True
    eval: EvalConfig = field(default_factory=EvalConfig)
    probe_anchors: int = 512
    rng_seed: int = 1
    out_dir: str = "runs"

    def __post_init__(self) -> None:
        if self.method not in METHOD_TABLE:
            raise ValueError(f"unknown method {self.method!r}; choose from {sorted(METHOD_TABLE)}")
        if self.support_capacity < self.batch_size:
            raise ValueError("support_capacity must be >= batch_size")
        if not 0 <= self.k < self.support_capacity:
            raise ValueError("need 0 <= K < support_capacity")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if self.aug_student not in AUG_TAGS or self.aug_teacher not in AUG_TAGS:
            raise ValueError(f"augmentation tags must be one of {AUG_TAGS}")
        if self.probe_anchors < 1:
            raise ValueError("probe_anchors must be positive")

    @property
    def scaled_lr(self) -> float:
        return self.base_lr * self.batch_size / 256.0


@dataclass
class ResolvedMethod:
    scheme_tag: str
    mix: MixPolicy
    strategy: str
    k: int


def resolve_method(config: RunConfig) -> ResolvedMethod:
    """Expand the method tag into its (scheme, mix policy, strategy, K) triple.

    Methods without mixture force mode='off'; methods with mixture use the
    config's mix policy and reject an explicit 'off' as contradictory. byol
    forces K = 0.
    """
    scheme, mixes, strategy = METHOD_TABLE[config.method]
    if mixes:
        if config.mix.mode == "off":
            raise ValueError(f"method {config.method!r} requires mixing; mix.mode='off' contradicts it")
        mix = config.mix
    else:
        mix = MixPolicy(mode="off")
    k = 0 if config.method == "byol" else config.k
    return ResolvedMethod(scheme_tag=scheme, mix=mix, strategy=strategy, k=k)


def reference_config(seed: int = 1, out_dir: str = "runs") -> RunConfig:
    """The desk-scale reference run: completes in seconds on one CPU core
    while leaving headroom for the mixture-vs-baseline gaps to appear."""
    return RunConfig(rng_seed=seed, out_dir=out_dir)


def config_to_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)


def _build(cls, data: dict):
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if f.name == "dataset":
            value = DatasetSpec(**value)
        elif f.name == "mix":
            value = MixPolicy(**value)
        elif f.name == "eval":
            probe = value.get("probe", {})
            value = EvalConfig(
                k_eval=value.get("k_eval", DEFAULT_K_EVAL),
                probe=ProbeConfig(**{**probe, "milestones": tuple(probe.get("milestones", (60, 80)))}),
            )
        kwargs[f.name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def save_config(config: RunConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(config), fh, indent=2, sort_keys=True)


def run_id_for(config: RunConfig) -> str:
    """Deterministic run identifier; ignores out_dir so re-runs into
    different directories produce identical ids (and identical metrics)."""
    payload = config_to_dict(config)
    payload.pop("out_dir", None)
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:8]
    return f"{config.method}-k{config.k}-seed{config.rng_seed}-{digest}"
