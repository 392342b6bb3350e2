"""Uniform load / sample / energy dispatch over the three model families."""

from __future__ import annotations

import json

import numpy as np

from . import indep, potts, vae
from .msa import Msa

KINDS = ("indep", "potts", "svae")


def kind_of(model) -> str:
    if isinstance(model, indep.IndepParams):
        return "indep"
    if isinstance(model, potts.PottsParams):
        return "potts"
    if isinstance(model, vae.SVAE):
        return "svae"
    raise TypeError(f"unknown model type {type(model).__name__}")


def model_to_json(model) -> dict:
    return {
        "indep": indep.indep_to_json,
        "potts": potts.potts_to_json,
        "svae": vae.vae_to_json,
    }[kind_of(model)](model)


def model_from_json(d: dict):
    version = d.get("version")
    if version == indep.INDEP_VERSION:
        return indep.indep_from_json(d)
    if version == potts.POTTS_VERSION:
        return potts.potts_from_json(d)
    if version == vae.VAE_VERSION:
        return vae.vae_from_json(d)
    raise ValueError(f"unrecognized model file version {version!r}")


def save_model(model, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_json(model), fh)


def load_model(path):
    with open(path) as fh:
        return model_from_json(json.load(fh))


def sample_model(model, n: int, seed: int, sampler: dict | None = None) -> Msa:
    """Draw ``n`` sequences; ``sampler`` holds Gibbs options for Potts models."""
    kind = kind_of(model)
    if kind == "indep":
        return indep.sample_indep(model, n, seed)
    if kind == "potts":
        return potts.gibbs_sample(model, n, seed=seed, **(sampler or {}))
    return vae.sample_vae(model, n, seed)


def model_energies(model, data: np.ndarray, estimator: str = "importance",
                   n_samples: int = 1000, seed: int = 0) -> np.ndarray:
    """Statistical energies; Potts energies are defined up to a constant."""
    kind = kind_of(model)
    if kind == "indep":
        return indep.energies_indep(model, data)
    if kind == "potts":
        return potts.potts_energies(model, data)
    return vae.vae_energies(model, data, estimator, n_samples, seed)
