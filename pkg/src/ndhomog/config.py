"""Experiment configuration schema (YAML or JSON on disk)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .env import FieldSpec, InvalidSpec

SCHEMA_VERSION = 1

Kind = Literal[
    "scaling",
    "dirichlet_checkerboard",
    "green_decay",
    "barrier_audit",
    "regularity",
    "homog_rate",
    "sensitivity",
    "concentration_suite",
]


class ExperimentConfig(BaseModel):
    """All knobs of one experiment; unknown keys are rejected.

    Boxes: with ``box_factor`` set, the truncation radius is
    ``ceil(box_factor / eps)``; otherwise ``box_rule`` picks the certified
    ``cosh`` rule or the ``tail`` rule (see ``corrector.truncation_radius``).
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    schema_version: int = SCHEMA_VERSION
    kind: Kind
    experiment_id: Optional[str] = None
    field: dict
    M: Optional[list[list[float]]] = None
    eps: list[float] = Field(default_factory=list)
    R: list[float] = Field(default_factory=list)
    samples: int = Field(10, ge=1)
    K: int = Field(32, ge=2)
    h: float = 1.0
    tol: float = Field(1e-8, gt=0)
    trunc_tol: float = Field(1e-6, gt=0)
    box_rule: Literal["cosh", "tail"] = "cosh"
    box_factor: Optional[float] = Field(None, gt=0)
    max_unknowns: int = Field(20_000_000, ge=1)
    solver: Literal["amg", "gs", "direct"] = "amg"
    reuse_hierarchy: bool = True
    base_seed: int = 0
    output_dir: Optional[str] = None
    # dirichlet_checkerboard
    source_width: float = Field(0.25, gt=0)
    # green_decay / sensitivity
    annulus: Optional[list[float]] = None
    fit_mode: Literal["screened", "direct", "derivative"] = "screened"
    window: Optional[float] = None
    sites_per_shell: int = Field(6, ge=1)
    # barrier_audit
    barrier_R_factor: float = Field(8.0, gt=0)
    alpha: float = Field(0.1, gt=0, lt=1)
    # regularity / homog_rate
    theta: float = Field(0.25, gt=0, lt=0.5)
    ahom: Optional[list[list[float]]] = None
    rhs_f: float = 1.0
    # concentration_suite
    betas: list[float] = Field(default_factory=lambda: [0.5, 1.0, 1.5])
    p_values: list[float] = Field(default_factory=lambda: [2.0, 4.0, 6.0])
    n_sites: int = Field(100, ge=1)

    @field_validator("schema_version")
    @classmethod
    def _version(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}, expected {SCHEMA_VERSION}")
        return v

    @field_validator("h")
    @classmethod
    def _h(cls, v):
        if v not in (1.0, 0.5, 0.25, 0.125):
            raise ValueError("h must be 1, 1/2, 1/4 or 1/8")
        return v

    @field_validator("field")
    @classmethod
    def _field(cls, v):
        try:
            spec = FieldSpec.from_dict(v)
        except (InvalidSpec, TypeError) as exc:
            raise ValueError(f"invalid field: {exc}") from exc
        return spec.to_dict()

    @field_validator("eps")
    @classmethod
    def _eps(cls, v):
        for e in v:
            if not (0 < e <= 0.5):
                raise ValueError("every eps must lie in (0, 1/2]")
        return v

    @model_validator(mode="after")
    def _checks(self):
        d = self.field["dim"]
        if self.M is not None:
            m = np.asarray(self.M, dtype=float)
            if m.shape != (d, d) or not np.allclose(m, m.T):
                raise ValueError("M must be a symmetric d x d matrix")
        if self.kind in ("scaling", "dirichlet_checkerboard") and len(self.eps) < 3:
            raise ValueError(f"{self.kind} needs at least 3 eps values")
        if self.kind in ("green_decay", "sensitivity") and not self.eps:
            raise ValueError(f"{self.kind} needs eps")
        if self.kind in ("regularity", "homog_rate") and len(self.R) < 2:
            raise ValueError(f"{self.kind} needs at least 2 radii")
        return self

    # helpers -------------------------------------------------------------
    @property
    def exp_id(self) -> str:
        return self.experiment_id or self.kind

    def field_spec(self) -> FieldSpec:
        return FieldSpec.from_dict(self.field)

    def matrix_M(self) -> np.ndarray:
        d = self.field["dim"]
        return np.eye(d) if self.M is None else np.asarray(self.M, dtype=float)

    def resolved(self) -> dict:
        return self.model_dump(mode="json")


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    if str(path).endswith(".json"):
        data = json.loads(text)
    else:
        data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ValueError("config must be a mapping")
    return ExperimentConfig(**data)
