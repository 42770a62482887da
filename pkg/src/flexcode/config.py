"""Flat run configuration with a ``key = value`` text format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .data import SynthConfig

VARIANTS = ("full", "sid_only", "cid_only", "fixed_split", "no_alignment")


@dataclass(frozen=True)
class Config:
    # inputs
    interactions_path: str = ""
    semantic_path: str = ""
    k_core: int = 5
    dtype: str = "float32"
    seed: int = 0

    # synthetic world (used by `synth` and `prepare --synth`)
    synth_items: int = 2000
    synth_users: int = 1000
    synth_zipf: float = 1.2
    synth_latent_dim: int = 32
    synth_semantic_weight: float = 0.9
    synth_tail_share: float = 0.4

    # collaborative encoder
    d_col: int = 64
    cf_layers: int = 2
    cf_heads: int = 2
    cf_max_len: int = 50
    cf_epochs: int = 20
    cf_lr: float = 1e-3
    cf_batch: int = 128
    cf_dropout: float = 0.1

    # residual quantizers
    codebook_size: int = 512
    d_code: int = 64
    levels: int = 3
    rq_hidden: int = 128
    rq_epochs: int = 60
    rq_lr: float = 1e-3
    rq_batch: int = 256
    beta: float = 0.25
    dead_code_reset: bool = True

    # alignment
    d_shared: int = 64
    cca_temperature: float = 0.1
    cca_symmetric: bool = False
    lambda_cca: float = 0.1

    # router
    router_hidden: int = 16
    tau_r: float = 1.0
    tau_m: float = 0.1
    lambda_lb: float = 0.01
    lambda_smooth: float = 0.01
    num_bands: int = 4
    router_lr: float = 1e-3
    router_warm_start: bool = True
    gate_slope: float = 4.0

    # generator
    gen_layers: int = 2
    gen_heads: int = 4
    gen_dim: int = 128
    gen_context: int = 20
    gen_epochs: int = 30
    gen_lr: float = 1e-3
    gen_batch: int = 64
    gen_dropout: float = 0.1
    lambda_arg: float = 1.0

    # joint fine-tuning
    joint_quantizer_lr_scale: float = 0.01

    # evaluation
    beam_width: int = 20
    eval_ks: str = "5,10"
    head_fraction: float = 0.2
    variant: str = "full"

    def validate(self) -> "Config":
        for name in ("tau_m", "tau_r", "cca_temperature"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("beta", "lambda_cca", "lambda_arg", "lambda_lb", "lambda_smooth",
                     "cf_lr", "rq_lr", "gen_lr", "router_lr", "joint_quantizer_lr_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.levels < 2:
            raise ValueError("levels (token budget) must be >= 2")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if not 0.0 < self.head_fraction < 1.0:
            raise ValueError("head_fraction must lie in (0, 1)")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.beam_width < max(self.ks):
            raise ValueError("beam_width must be >= the largest K")
        return self

    @property
    def ks(self) -> tuple[int, ...]:
        return tuple(int(k) for k in self.eval_ks.split(",") if k.strip())

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            num_items=self.synth_items,
            num_users=self.synth_users,
            zipf_exponent=self.synth_zipf,
            latent_dim=self.synth_latent_dim,
            semantic_weight=self.synth_semantic_weight,
            tail_share=self.synth_tail_share,
            head_fraction=self.head_fraction,
        )

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def fingerprint(self, *names: str) -> str:
        """Short hash over all fields, or over ``names`` only."""
        if names:
            text = "\n".join(f"{n}={getattr(self, n)!r}" for n in names)
        else:
            text = self.dumps()
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _coerce(kind, raw: str, key: str):
    if kind in (bool, "bool"):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw


def loads(text: str, base: Config | None = None) -> Config:
    base = base or Config()
    types = {f.name: f.type for f in fields(Config)}
    changes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        changes[key] = _coerce(types[key], raw, key)
    return dataclasses.replace(base, **changes)


def load_config(path: str | Path | None, **overrides) -> Config:
    cfg = Config()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        cfg = loads(p.read_text(encoding="utf-8"))
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**overrides).validate()
