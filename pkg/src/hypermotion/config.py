"""Flat ``key = value`` run configuration.

Keys mirror the hyperparameter table names where one exists (T, F, hidden,
lr, decay, alpha, beta, lambda, scales, categories, tau, k_samples).
``lambda`` is the past-reconstruction weight; the prior variance has its
own key, ``prior_scale``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .encoder import EncoderConfig
from .generator import LossWeights, RhinoConfig
from .giraffe import DgcnConfig, GiraffeConfig


class ConfigFileError(ValueError):
    pass


@dataclass
class RunConfig:
    T: int = 30
    F: int = 50
    hidden: int = 128
    d_embed: int = 128
    d_latent: int = 16
    gen_hidden: int = 64
    cheb_order: int = 2
    dgcn_layers: int = 2
    lr: float = 1e-3
    decay: float = 0.6
    decay_every: int = 500
    clip_norm: float = 5.0
    alpha: float = 1.0
    beta: float = 0.8
    lambda_recon: float = 0.5
    prior_scale: float = 0.5
    scales: tuple = (3, 5)
    categories: int = 4
    tau: float = 1.0
    tau_min: float = 0.1
    passes: int = 2
    selection_mode: str = "auto"
    k_samples: int = 10
    steps: int = 2000
    batch_size: int = 16
    seed: int = 0
    neighborhood: int = 6
    stride: int = 80
    min_neighbors: int = 0
    intent_threshold: float = 1.5
    train_fraction: float = 0.7

    def giraffe(self) -> GiraffeConfig:
        return GiraffeConfig(d_embed=self.d_embed, hidden=self.hidden, fut_len=self.F,
                             dgcn=DgcnConfig(self.cheb_order, self.dgcn_layers, self.hidden))

    def rhino(self, variant: str = "full") -> RhinoConfig:
        enc = EncoderConfig(scales=tuple(self.scales), d_embed=self.d_embed, hidden=self.hidden,
                            categories=self.categories, tau=self.tau, passes=self.passes,
                            selection_mode=self.selection_mode)
        weights = LossWeights(self.alpha, self.beta, self.lambda_recon, self.prior_scale,
                              self.k_samples)
        cfg = RhinoConfig(encoder=enc, d_latent=self.d_latent, hidden=self.gen_hidden,
                          weights=weights, hist_len=self.T, fut_len=self.F)
        return cfg.for_variant(variant)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        cfg = cls(**{k: v for k, v in d.items() if k in known})
        cfg.scales = tuple(cfg.scales)
        return cfg


ALIASES = {"lambda": "lambda_recon"}

# desk-scale widths used by the acceptance suite; CPU budget bound
DESK = {"hidden": 48, "d_embed": 32, "gen_hidden": 32, "lr": 3e-3, "decay_every": 400}


def _coerce(name: str, raw: str, default):
    raw = raw.strip()
    if name == "scales":
        return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = RunConfig() if base is None else RunConfig.from_dict(base.to_dict())
    defaults = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        key = ALIASES.get(key, key)
        if key not in defaults:
            raise ConfigFileError(f"line {lineno}: unknown key {key!r}")
        try:
            setattr(cfg, key, _coerce(key, value, defaults[key]))
        except ValueError as exc:
            raise ConfigFileError(f"line {lineno}: bad value for {key}: {exc}") from None
    return cfg


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = parse_config_text(Path(path).read_text(), cfg)
    for k, v in (overrides or {}).items():
        setattr(cfg, ALIASES.get(k, k), v)
    cfg.scales = tuple(cfg.scales)
    return cfg


def desk_config(**overrides) -> RunConfig:
    return load_config(overrides={**DESK, **overrides})


def dump_config_text(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if k == "lambda_recon":
            k = "lambda"
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
