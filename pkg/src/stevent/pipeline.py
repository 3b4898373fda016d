"""Glue from a panel and a model name to normal values and fit artifacts."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .baselines import MAX_ORDER, fit_panel_baselines
from .errors import ConfigError
from .hdgm import FitResult, em_fit, normal_values
from .panel import Panel, WindowSplit

MODELS = ("hdgm", "lm", "regar1", "regarma")


@dataclass
class ModelFit:
    """Normal values for one model plus whatever the fitter returned."""

    model: str
    nc: np.ndarray
    hdgm: FitResult | None = None
    baselines: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def summary_rows(self) -> list[dict]:
        return [f.summary() for f in self.baselines]

    @property
    def converged(self) -> bool:
        if self.hdgm is not None:
            return self.hdgm.converged
        return all(f.converged for f in self.baselines)


def expand_models(models) -> list[str]:
    if isinstance(models, str):
        models = [models]
    out = []
    for m in models:
        m = str(m).lower()
        if m == "all":
            out.extend(x for x in MODELS if x not in out)
        elif m in MODELS:
            if m not in out:
                out.append(m)
        else:
            raise ConfigError(f"unknown model {m!r}; choose from {MODELS + ('all',)}")
    return out


def fit_model(panel: Panel, split: WindowSplit, model: str, *, max_order: int = MAX_ORDER,
              hdgm_options: dict | None = None, insample: str = "smoothed") -> ModelFit:
    """Fit ``model`` on the estimation window and return normal values (N, tau)."""
    model = model.lower()
    if model == "hdgm":
        res = em_fit(panel, split, **(hdgm_options or {}))
        nc = normal_values(panel, split, res.params, insample=insample,
                           intercept=(hdgm_options or {}).get("intercept", True))
        notes = list(res.warnings)
        return ModelFit(model, nc, hdgm=res, notes=notes)
    if model in ("lm", "regar1", "regarma"):
        fits, nc, notes = fit_panel_baselines(panel, split, model, max_order=max_order)
        return ModelFit(model, nc, baselines=fits, notes=list(notes))
    raise ConfigError(f"unknown model {model!r}; choose from {MODELS}")
