"""Versioned JSON model files.

A model file is a JSON object ``{"format", "version", "kind", "payload"}``.
Arrays are stored as ``{"shape": [...], "data": [...]}`` with full-precision
floats, so every parameter array round-trips bit for bit.  Files are written
to a temporary sibling and renamed, so a failed write never leaves a partial
model behind.
"""

from __future__ import annotations

import dataclasses
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ModelFormatError
from .kernel import BasisKernelParams, CoregionalizationWeights, StructuredKernel
from .population import PopulationCluster, PopulationModel
from .shrinkage import PriorConfig, ShrinkageState
from .trainer import FitResult, TrainConfig

FORMAT = "smlmc-model"
VERSION = "1.0.0"


def _arr(x) -> dict:
    a = np.asarray(x, dtype=float)
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _unarr(d) -> np.ndarray:
    try:
        a = np.array(d["data"], dtype=float)
        return a.reshape(d["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed array entry: {exc}") from exc


def _kernel_to(k: StructuredKernel) -> dict:
    return {
        "basis": [{"mu": b.mu, "v": b.v} for b in k.basis],
        "weights": [{"A": _arr(w.A), "lam": _arr(w.lam)} for w in k.weights],
        "noise_var": _arr(k.noise_var),
    }


def _kernel_from(d) -> StructuredKernel:
    return StructuredKernel(
        [BasisKernelParams(float(b["mu"]), float(b["v"])) for b in d["basis"]],
        [CoregionalizationWeights(_unarr(w["A"]), _unarr(w["lam"])) for w in d["weights"]],
        _unarr(d["noise_var"]),
    )


def _state_to(s: ShrinkageState | None):
    if s is None:
        return None
    return {name: [_arr(x) for x in getattr(s, name)] for name in ("psi", "delta", "phi", "tau")}


def _state_from(d):
    if d is None:
        return None
    return ShrinkageState(*[[_unarr(x) for x in d[name]] for name in ("psi", "delta", "phi", "tau")])


def _config_to(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)


def _config_from(d) -> TrainConfig:
    d = dict(d)
    d["prior"] = PriorConfig(**d["prior"])
    for key in ("length_scale_init_range", "period_init_range", "a_init_range", "eta_grid"):
        if key in d:
            d[key] = tuple(d[key])
    return TrainConfig(**d)


def _fit_to(r: FitResult) -> dict:
    return {
        "kernel": _kernel_to(r.kernel),
        "shrinkage": _state_to(r.shrinkage),
        "objective_trace": [float(x) for x in r.objective_trace],
        "log_marginal": float(r.log_marginal),
        "converged": bool(r.converged),
        "mean": _arr(r.mean),
        "scale": _arr(r.scale),
        "patient_id": r.patient_id,
        "covariate_names": list(r.covariate_names),
        "config": _config_to(r.config),
        "seed": r.seed,
        "n_obs": r.n_obs,
    }


def _fit_from(d) -> FitResult:
    return FitResult(
        kernel=_kernel_from(d["kernel"]),
        shrinkage=_state_from(d["shrinkage"]),
        objective_trace=[float(x) for x in d["objective_trace"]],
        log_marginal=float(d["log_marginal"]),
        converged=bool(d["converged"]),
        mean=_unarr(d["mean"]),
        scale=_unarr(d["scale"]),
        patient_id=d["patient_id"],
        covariate_names=list(d["covariate_names"]),
        config=_config_from(d["config"]),
        seed=d["seed"],
        n_obs=int(d["n_obs"]),
    )


def _population_to(m: PopulationModel) -> dict:
    return {
        "clusters": [
            {
                "mu": c.params.mu,
                "v": c.params.v,
                "B": _arr(c.B),
                "A": _arr(c.A),
                "lam": _arr(c.lam),
                "member_count": c.member_count,
                "coverage": c.coverage,
            }
            for c in m.clusters
        ],
        "frozen_masks": [_arr(mask.astype(float)) for mask in m.frozen_mask()],
        "noise_var": _arr(m.noise_var),
        "covariate_names": list(m.covariate_names),
        "mean": _arr(m.mean),
        "scale": _arr(m.scale),
        "provenance": m.provenance,
    }


def _population_from(d) -> PopulationModel:
    clusters = [
        PopulationCluster(
            BasisKernelParams(float(c["mu"]), float(c["v"])),
            _unarr(c["B"]),
            _unarr(c["A"]),
            _unarr(c["lam"]),
            int(c["member_count"]),
            float(c["coverage"]),
        )
        for c in d["clusters"]
    ]
    return PopulationModel(
        clusters,
        _unarr(d["noise_var"]),
        list(d["covariate_names"]),
        _unarr(d["mean"]),
        _unarr(d["scale"]),
        d.get("provenance", {}),
    )


def _univariate_to(ks) -> dict:
    return {"kernels": [_kernel_to(k) for k in ks["kernels"]], "covariate_names": ks["covariate_names"],
            "mean": _arr(ks["mean"]), "scale": _arr(ks["scale"])}  # fmt: skip


def _univariate_from(d) -> dict:
    return {"kernels": [_kernel_from(k) for k in d["kernels"]], "covariate_names": list(d["covariate_names"]),
            "mean": _unarr(d["mean"]), "scale": _unarr(d["scale"])}  # fmt: skip


_WRITERS = {
    "kernel": _kernel_to,
    "fit": _fit_to,
    "population": _population_to,
    "univariate": _univariate_to,
}
_READERS = {
    "kernel": _kernel_from,
    "fit": _fit_from,
    "population": _population_from,
    "univariate": _univariate_from,
}


def kind_of(obj) -> str:
    if isinstance(obj, StructuredKernel):
        return "kernel"
    if isinstance(obj, FitResult):
        return "fit"
    if isinstance(obj, PopulationModel):
        return "population"
    if isinstance(obj, dict) and "kernels" in obj:
        return "univariate"
    raise ModelFormatError(f"cannot serialize {type(obj).__name__}")


def dumps_model(obj, meta: dict | None = None) -> str:
    kind = kind_of(obj)
    doc = {"format": FORMAT, "version": VERSION, "kind": kind, "meta": meta or {}, "payload": _WRITERS[kind](obj)}
    return json.dumps(doc, indent=1, allow_nan=True)


def save_model(path, obj, meta: dict | None = None) -> None:
    text = dumps_model(obj, meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name, suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def loads_model(text: str):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"model file is not valid JSON (truncated?): {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise ModelFormatError("not a model file")
    version = str(doc.get("version", ""))
    if version.split(".")[0] != VERSION.split(".")[0]:
        raise ModelFormatError(f"unsupported model version {version!r} (expected {VERSION})")
    kind = doc.get("kind")
    if kind not in _READERS:
        raise ModelFormatError(f"unknown model kind {kind!r}")
    try:
        return _READERS[kind](doc["payload"])
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed {kind} payload: {exc}") from exc


def load_model(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"cannot read model file {path}: {exc}") from exc
    return loads_model(text)
