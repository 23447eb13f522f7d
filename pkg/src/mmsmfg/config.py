"""Experiment configuration: YAML files validated against pydantic schemas."""

from __future__ import annotations

from pathlib import Path
from typing import Any, List, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .core import InitialLaw
from .errors import InvalidArgument

Matrix = Union[float, List[float], List[List[float]]]

KINDS = ("riccati", "lqg-solve", "oscillator", "mv-convergence", "nash-check", "fixed-point", "gain-estimate")


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LawConfig(Strict):
    kind: Literal["gaussian", "uniform", "point", "vonmises"] = "gaussian"
    mean: float = 0.0
    variance: float = Field(1.0, ge=0)
    kappa: float = Field(1.0, ge=0)

    def build(self) -> InitialLaw:
        if self.kind == "uniform":
            return InitialLaw.uniform()
        if self.kind == "point":
            return InitialLaw.point(self.mean)
        if self.kind == "vonmises":
            return InitialLaw.vonmises(self.mean, self.kappa)
        return InitialLaw.gaussian(self.mean, self.variance)


class RiccatiModel(Strict):
    A: Matrix = 0.0
    B: Matrix = 1.0
    Q: Matrix = 1.0
    R: Matrix = 1.0
    T: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _check(self):
        for name in ("Q", "R"):
            M = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if M.shape[0] != M.shape[1]:
                raise ValueError(f"{name} must be square")
            if not np.allclose(M, M.T, atol=1e-12, rtol=0):
                raise ValueError(f"{name} must be symmetric (max asymmetry {np.max(np.abs(M - M.T)):.3g})")
            ev = np.linalg.eigvalsh(M)
            if name == "R" and ev.min() <= 0:
                raise ValueError("R must be positive definite")
            if name == "Q" and ev.min() < -1e-12:
                raise ValueError("Q must be positive semidefinite")
        return self


class LqgModel(Strict):
    A0: Matrix = 0.1
    B0: Matrix = 1.0
    F0: Matrix = 0.3
    S0: Matrix = 0.4
    Q0: Matrix = 1.0
    R0: Matrix = 1.0
    H0: Matrix = 0.5
    eta0: Matrix = 0.2
    A: Matrix = -0.2
    B: Matrix = 1.0
    F: Matrix = 0.2
    G: Matrix = 0.3
    S: Matrix = 0.5
    Q: Matrix = 1.0
    R: Matrix = 1.0
    H: Matrix = 0.6
    Hhat: Matrix = 0.3
    eta: Matrix = -0.1
    T: float = Field(1.0, gt=0)
    major_init: LawConfig = LawConfig(mean=1.0, variance=0.1)
    minor_init: LawConfig = LawConfig(mean=0.5, variance=0.2)

    @model_validator(mode="after")
    def _check(self):
        self.build()
        return self

    def build(self):
        from .lqg import LqgParams

        kw = {k: getattr(self, k) for k in LqgParams.__dataclass_fields__ if k not in ("major_init", "minor_init")}
        try:
            return LqgParams(**kw, major_init=self.major_init.build(), minor_init=self.minor_init.build())
        except InvalidArgument as exc:
            raise ValueError(str(exc)) from None


class OscillatorModel(Strict):
    sigma: float = Field(0.5, ge=0)
    sigma0: float = Field(0.3, ge=0)
    r: float = Field(0.5, gt=0)
    lam: float = Field(0.5, gt=0, lt=1)
    T: float = Field(0.5, gt=0)
    minor_init: LawConfig = LawConfig(kind="vonmises", mean=float(np.pi), kappa=1.0)
    major_init: LawConfig = LawConfig(kind="vonmises", mean=float(np.pi / 2), kappa=1.0)
    major_point: Optional[float] = None

    def build(self):
        from .hjbfpk import OscillatorParams

        return OscillatorParams(self.sigma, self.sigma0, self.r, self.lam, self.T)


class NashModel(OscillatorModel):
    """Oscillator model with a deterministic (point) major agent by default."""

    sigma0: float = Field(0.0, ge=0)


class KuramotoModel(Strict):
    K: float = 1.0
    kappa: float = 0.5
    K0: float = 0.5
    sigma: float = Field(0.5, ge=0)
    sigma0: float = Field(0.3, ge=0)
    gain: float = 0.5
    T: float = Field(1.0, gt=0)
    major_init: LawConfig = LawConfig(mean=0.0, variance=0.5)
    minor_init: LawConfig = LawConfig(mean=1.0, variance=1.0)


class Numerics(Strict):
    steps: int = Field(256, ge=1)
    cells: int = Field(128, ge=16)
    lattice_levels: int = Field(0, ge=0)
    damping: float = Field(0.5, gt=0, le=1)
    tol: float = Field(1e-6, gt=0)
    max_iter: int = Field(50, ge=1)
    particles: Optional[int] = Field(None, ge=2)
    N_list: List[int] = [8, 16, 32, 64, 128, 256, 512]
    reps: int = Field(20, ge=1)
    scenarios: int = Field(200, ge=1)
    oracle_paths: int = Field(0, ge=0)
    picard_tol: float = Field(1e-8, gt=0)
    picard_max: int = Field(50, ge=1)
    sizes: List[float] = [1e-3, 1e-2]
    deviation: Literal["best_response", "offset", "gain"] = "best_response"
    deviation_parameters: List[float] = []

    @field_validator("N_list")
    @classmethod
    def _increasing(cls, v):
        if any(b <= a for a, b in zip(v, v[1:])) or any(n < 1 for n in v):
            raise ValueError("N_list must be positive and strictly increasing")
        return v


CHECKS = {
    "riccati": ("closed_form", "psd"),
    "lqg-solve": ("consistency", "oracle"),
    "oscillator": ("converged", "mass", "positivity"),
    "fixed-point": ("converged", "contraction"),
    "mv-convergence": ("slope",),
    "nash-check": ("identity_zero", "separation", "exponent"),
    "gain-estimate": ("gain_product",),
}

MODEL_FOR = {
    "riccati": RiccatiModel,
    "lqg-solve": LqgModel,
    "oscillator": OscillatorModel,
    "fixed-point": OscillatorModel,
    "nash-check": NashModel,
    "mv-convergence": KuramotoModel,
}


class ExperimentConfig(Strict):
    experiment: Literal[KINDS]  # type: ignore[valid-type]
    seed: int = Field(0, ge=0)
    output: str = "out"
    model: Any = None
    numerics: Numerics = Numerics()
    gain_model: Literal["oscillator", "lqg"] = "oscillator"
    checks: Optional[List[str]] = None

    def model_class(self):
        if self.experiment == "gain-estimate":
            return LqgModel if self.gain_model == "lqg" else OscillatorModel
        return MODEL_FOR[self.experiment]

    @model_validator(mode="after")
    def _known_checks(self):
        if self.checks is not None:
            bad = [c for c in self.checks if c not in CHECKS[self.experiment]]
            if bad:
                raise ValueError(f"checks {bad} not available for {self.experiment}; choose from {list(CHECKS[self.experiment])}")
        return self

    def declared_checks(self):
        return list(CHECKS[self.experiment]) if self.checks is None else list(self.checks)

    def echo(self) -> dict:
        # the output location does not affect results, so it stays out of the echo
        return self.model_dump(mode="json", exclude={"output"})


_FIELD_NAMES = set(LqgModel.model_fields) | set(RiccatiModel.model_fields)


class ConfigError(InvalidArgument):
    def __init__(self, diagnostics):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = list(diagnostics)


def _diagnostics(err: ValidationError, prefix=()) -> List[str]:
    out = []
    for e in err.errors():
        loc = ".".join(str(p) for p in prefix + tuple(e["loc"]))
        msg = e["msg"].removeprefix("Value error, ")
        head = msg.split(" ", 1)[0]
        if prefix and head.isidentifier() and head in _FIELD_NAMES:
            # model-level invariants name the offending entry first
            loc = f"{loc}.{head}"
        out.append(f"{loc or '<root>'}: {msg}")
    return out


def parse_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError(["<root>: config must be a mapping"])
    diags, cfg = [], None
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        diags += _diagnostics(exc)
    kind = data.get("experiment")
    if kind in KINDS:
        probe = ExperimentConfig.model_construct(experiment=kind, gain_model=data.get("gain_model", "oscillator"))
        try:
            model = probe.model_class().model_validate(data.get("model") or {})
        except ValidationError as exc:
            diags += _diagnostics(exc, ("model",))
    if diags:
        raise ConfigError(diags)
    object.__setattr__(cfg, "model", model)
    return cfg


def validate_config(path) -> ExperimentConfig:
    """Load and schema-check a YAML config; raises :class:`ConfigError` with key paths."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError([f"{p}: file not found"])
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError([f"{p}: malformed YAML ({exc})"]) from None
    return parse_config(data or {})
