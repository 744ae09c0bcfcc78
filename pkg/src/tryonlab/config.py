"""Run configuration: one flat JSON document with a section per stage."""
import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ValidationError


@dataclass
class DataConfig:
    count: int = 600
    seed: int = 0
    canvas: list = field(default_factory=lambda: [64, 48])
    train_fraction: float = 5 / 6


@dataclass
class AutoencoderConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 2e-3
    kl_weight: float = 1e-6
    downsample: int = 4
    latent_channels: int = 4
    widths: list = field(default_factory=lambda: [16, 32])


@dataclass
class FlowConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    hold_frac: float = 0.3
    lambda_per: float = 0.1
    lambda_sec: float = 10.0
    lambda_tv: float = 0.01
    steps: int | None = None

    @property
    def weights(self):
        return (self.lambda_per, self.lambda_sec, self.lambda_tv)


def _warp_defaults():
    return FlowConfig(lambda_per=0.2, lambda_sec=0.01, lambda_tv=6.0)


@dataclass
class DiffusionConfig:
    schedule: str = "linear"
    T: int = 200
    steps: int = 4000
    batch_size: int = 8
    lr: float = 5e-4
    warmup_steps: int = 300
    warmup_start: float = 1e-6
    cfg_drop: float = 0.2
    lambda_cons: float = 0.15
    channels: list = field(default_factory=lambda: [32, 64])
    time_dim: int = 128
    token_dim: int = 64


@dataclass
class SamplerSection:
    steps: int = 50
    init_mode: str = "clothes_posterior"
    guidance_scale: float = 1.0
    freeu: bool = True
    b1: float = 1.1
    b2: float = 1.2
    s1: float = 0.9
    s2: float = 0.6


@dataclass
class AblationFlags:
    prior_branch: bool = True
    cons_loss: bool = True
    global_cond: bool = True


@dataclass
class EvalConfig:
    max_samples: int | None = None


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    warp: FlowConfig = field(default_factory=_warp_defaults)
    flatten: FlowConfig = field(default_factory=FlowConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        return asdict(self)

    def fingerprint(self, *sections):
        """Short hash of the named sections (all when none given) plus the seed."""
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in ("seed",) + sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _build(cls, raw, path, errors):
    if not isinstance(raw, dict):
        errors.append(f"{path or 'config'}: expected an object")
        return cls()
    known = {f.name: f for f in fields(cls)}
    for k in raw:
        if k not in known:
            errors.append(f"unknown key {path + '.' if path else ''}{k}")
    kwargs = {}
    defaults = cls()
    for name, f in known.items():
        if name not in raw:
            continue
        sub = getattr(defaults, name)
        if dataclasses.is_dataclass(sub):
            merged = _build(type(sub), {**asdict(sub), **raw[name]} if isinstance(raw[name], dict)
                            else raw[name], f"{path + '.' if path else ''}{name}", errors)
            kwargs[name] = merged
        else:
            kwargs[name] = raw[name]
    return dataclasses.replace(defaults, **kwargs)


def _validate(cfg, errors):
    for sec_name in ("warp", "flatten"):
        sec = getattr(cfg, sec_name)
        for lam in ("lambda_per", "lambda_sec", "lambda_tv"):
            if getattr(sec, lam) < 0:
                errors.append(f"{sec_name}.{lam} must be non-negative")
    if cfg.diffusion.lambda_cons < 0:
        errors.append("diffusion.lambda_cons must be non-negative")
    if cfg.diffusion.T < 1:
        errors.append("diffusion.T must be >= 1")
    if cfg.diffusion.schedule not in ("linear", "cosine"):
        errors.append("diffusion.schedule must be 'linear' or 'cosine'")
    if not 0 <= cfg.diffusion.cfg_drop <= 1:
        errors.append("diffusion.cfg_drop must lie in [0, 1]")
    if not 1 <= cfg.sampler.steps <= cfg.diffusion.T:
        errors.append("sampler.steps must lie in [1, diffusion.T]")
    if cfg.sampler.init_mode not in ("gaussian", "clothes_posterior"):
        errors.append("sampler.init_mode must be 'gaussian' or 'clothes_posterior'")
    if cfg.sampler.guidance_scale < 0:
        errors.append("sampler.guidance_scale must be >= 0")
    for k in ("b1", "b2", "s1", "s2"):
        if getattr(cfg.sampler, k) <= 0:
            errors.append(f"sampler.{k} must be positive")
    if cfg.data.count < 2:
        errors.append("data.count must be >= 2")
    if not 0 < cfg.data.train_fraction < 1:
        errors.append("data.train_fraction must lie in (0, 1)")
    H, W = cfg.data.canvas
    if H * 3 != W * 4:
        errors.append("data.canvas must keep a 4:3 (H:W) ratio")
    d = cfg.autoencoder.downsample
    if H % d or W % d:
        errors.append("data.canvas must be divisible by autoencoder.downsample")


def config_from_dict(raw):
    errors = []
    cfg = _build(RunConfig, raw, "", errors)
    if not errors:
        _validate(cfg, errors)
    if errors:
        raise ValidationError("invalid config:\n  " + "\n  ".join(errors))
    return cfg


def load_config(path=None):
    """Defaults for ``None``; otherwise the JSON file merged over the defaults."""
    if path is None:
        return config_from_dict({})
    p = Path(path)
    try:
        raw = json.loads(p.read_text() or "{}")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{p}: not valid JSON ({exc})") from exc
    return config_from_dict(raw)


def save_config(cfg, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
