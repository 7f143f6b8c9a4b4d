"""Analytic score models, prediction conversions and guidance."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol

import numpy as np

from . import _backend
from .schedule import NoiseParam

__all__ = [
    "CallableModel",
    "ConditionError",
    "DegenerateModelError",
    "GaussianMixture",
    "Prediction",
    "ScoreModel",
    "convert_predictions",
    "gaussian_flow",
    "gm_denoiser",
    "gm_log_density",
    "gm_score",
    "guided_prediction",
    "isotropic_gaussian",
    "load_model",
    "save_model",
]


class ConditionError(KeyError):
    """A condition label the model does not know."""


class DegenerateModelError(ValueError):
    """Every component has zero noisy variance at the requested level."""


@dataclass(frozen=True)
class Prediction:
    """Noise and clean-data predictions at one ``(z, t)``."""

    noise: np.ndarray
    denoised: np.ndarray


class ScoreModel(Protocol):
    dim: int

    def predict(self, z: np.ndarray, t: float, param: NoiseParam, cond=None) -> Prediction: ...


def _as_batch(z):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        return np.ascontiguousarray(z[None, :]), True
    return np.ascontiguousarray(z), False


def _unbatch(x, single):
    return x[0] if single else x


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Isotropic Gaussian mixture ``sum_k w_k N(mu_k, s_k^2 I)``.

    ``conditions`` maps a label to per-component multipliers applied to the
    weights before renormalising; ``None`` is the full (null-condition)
    mixture.
    """

    weights: np.ndarray
    means: np.ndarray
    scales: np.ndarray
    conditions: Mapping[str, np.ndarray] = field(default_factory=dict)
    name: str = "gm"

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).ravel()
        mu = np.array(self.means, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[:, None]
        s = np.array(self.scales, dtype=np.float64).ravel()
        if w.size == 0:
            raise ValueError("a mixture needs at least one component")
        if mu.shape[0] != w.size or s.size != w.size:
            raise ValueError("weights, means and scales disagree on the component count")
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise ValueError("component weights must be positive and finite")
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise ValueError("component scales must be non-negative and finite")
        if not np.all(np.isfinite(mu)):
            raise ValueError("component means must be finite")
        w = w / w.sum()
        conds = {}
        for label, factor in dict(self.conditions).items():
            f = np.array(factor, dtype=np.float64).ravel()
            if f.size != w.size or np.any(f < 0) or not np.any(f > 0):
                raise ValueError(f"condition {label!r} needs {w.size} non-negative multipliers")
            conds[str(label)] = f
        for name, arr in (("weights", w), ("means", mu), ("scales", s)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "conditions", conds)
        with np.errstate(divide="ignore"):
            table = {None: np.log(w)}
            for label, f in conds.items():
                cw = w * f
                table[label] = np.log(cw / cw.sum())
        object.__setattr__(self, "_log_w", table)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def labels(self) -> list[str]:
        return sorted(self.conditions)

    def condition_weights(self, cond=None) -> np.ndarray:
        try:
            return np.exp(self._log_w[cond])
        except KeyError:
            raise ConditionError(f"unknown condition {cond!r}") from None

    def log_weights(self, cond, batch: int) -> np.ndarray:
        """Per-sample log weights, shape ``(batch, K)``."""
        if cond is None or isinstance(cond, str):
            try:
                row = self._log_w[cond]
            except KeyError:
                raise ConditionError(f"unknown condition {cond!r}") from None
            return np.ascontiguousarray(np.broadcast_to(row, (batch, row.size)))
        cond = list(cond)
        if len(cond) != batch:
            raise ValueError(f"got {len(cond)} condition labels for a batch of {batch}")
        try:
            return np.ascontiguousarray(np.stack([self._log_w[c] for c in cond]))
        except KeyError as exc:
            raise ConditionError(f"unknown condition {exc.args[0]!r}") from None

    def posterior(self, z, alpha: float, sigma: float, cond=None):
        """``(logp, score, denoised, resp)`` for a batch, via the active kernel."""
        zb, single = _as_batch(z)
        if zb.shape[1] != self.dim:
            raise ValueError(f"state dimension {zb.shape[1]} != model dimension {self.dim}")
        if not np.any(alpha * alpha * self.scales**2 + sigma * sigma > 0):
            raise DegenerateModelError("all components have zero variance at this noise level")
        out = _backend.gm_posterior(
            zb,
            np.ascontiguousarray(self.means),
            self.log_weights(cond, zb.shape[0]),
            np.ascontiguousarray(self.scales**2),
            float(alpha),
            float(sigma),
        )
        return tuple(_unbatch(np.asarray(x), single) for x in out)

    def predict(self, z, t: float, param: NoiseParam, cond=None) -> Prediction:
        alpha, sigma = float(param.alpha(t)), float(param.sigma(t))
        _, score, denoised, _ = self.posterior(z, alpha, sigma, cond)
        return Prediction(noise=-sigma * score, denoised=denoised)

    def denoise(self, z, t: float, param: NoiseParam, cond=None) -> np.ndarray:
        return self.predict(z, t, param, cond).denoised

    def sample_from(self, u: np.ndarray, eps: np.ndarray, cond=None) -> np.ndarray:
        """Map uniforms ``u (n,)`` and normals ``eps (n, d)`` to data samples."""
        cdf = np.cumsum(self.condition_weights(cond))
        comp = np.minimum(np.searchsorted(cdf, u, side="right"), self.n_components - 1)
        return self.means[comp] + self.scales[comp, None] * eps

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dim": self.dim,
            "components": [
                {"weight": float(w), "mean": [float(m) for m in mu], "scale": float(s)}
                for w, mu, s in zip(self.weights, self.means, self.scales)
            ],
            "conditions": {k: [float(x) for x in v] for k, v in sorted(self.conditions.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianMixture":
        comps = data["components"]
        model = cls(
            weights=[c["weight"] for c in comps],
            means=[c["mean"] for c in comps],
            scales=[c["scale"] for c in comps],
            conditions=data.get("conditions", {}),
            name=data.get("name", "gm"),
        )
        if "dim" in data and int(data["dim"]) != model.dim:
            raise ValueError(f"model spec says dim={data['dim']} but means have dim={model.dim}")
        return model

    @property
    def model_id(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return f"{self.name}-{hashlib.sha256(blob).hexdigest()[:16]}"


def isotropic_gaussian(dim: int, scale: float = 1.0, mean=None) -> GaussianMixture:
    mu = np.zeros(dim) if mean is None else np.asarray(mean, dtype=np.float64)
    return GaussianMixture([1.0], [mu], [scale], name="gaussian")


def load_model(path) -> GaussianMixture:
    with open(path) as fh:
        return GaussianMixture.from_dict(json.load(fh))


def save_model(model: GaussianMixture, path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=2)
        fh.write("\n")


class CallableModel:
    """Wrap a denoiser ``fn(z, t) -> x_hat`` as a score model (test doubles)."""

    def __init__(self, fn: Callable, dim: int, name: str = "callable"):
        self.fn = fn
        self.dim = dim
        self.name = name
        self.model_id = name

    def predict(self, z, t, param, cond=None) -> Prediction:
        z = np.asarray(z, dtype=np.float64)
        return convert_predictions(z, t, param, denoised=np.asarray(self.fn(z, t), dtype=np.float64))


def gm_log_density(model: GaussianMixture, z, alpha: float, sigma: float, cond=None):
    return model.posterior(z, alpha, sigma, cond)[0]


def gm_score(model: GaussianMixture, z, alpha: float, sigma: float, cond=None):
    return model.posterior(z, alpha, sigma, cond)[1]


def gm_denoiser(model: GaussianMixture, z, t: float, param: NoiseParam, cond=None):
    """Posterior mean ``E[x | z_t = z]`` under the (condition-reweighted) mixture."""
    return model.denoise(z, t, param, cond)


def convert_predictions(z, t: float, param: NoiseParam, noise=None, denoised=None) -> Prediction:
    """Fill in the missing prediction via ``x_hat = (z - sigma eps) / alpha``.

    Exactly one of ``noise`` / ``denoised`` must be given.
    """
    if (noise is None) == (denoised is None):
        raise ValueError("pass exactly one of noise= or denoised=")
    alpha, sigma = float(param.alpha(t)), float(param.sigma(t))
    z = np.asarray(z, dtype=np.float64)
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64)
        return Prediction(noise=noise, denoised=(z - sigma * noise) / alpha)
    if sigma == 0.0:
        raise ValueError("cannot recover the noise prediction at sigma(t) = 0")
    denoised = np.asarray(denoised, dtype=np.float64)
    return Prediction(noise=(z - alpha * denoised) / sigma, denoised=denoised)


def guided_prediction(model: ScoreModel, z, t: float, param: NoiseParam, cond, w: float) -> Prediction:
    """Classifier-free guidance: ``eps_null + w (eps_cond - eps_null)``."""
    if cond is None or (not isinstance(cond, str) and any(c is None for c in cond)):
        raise ConditionError("guidance needs a non-null condition label")
    if not np.isfinite(w):
        raise ValueError("guidance scale must be finite")
    if float(param.sigma(t)) == 0.0:
        raise ValueError("guidance is undefined at sigma(t) = 0")
    null = model.predict(z, t, param, None).noise
    cnd = model.predict(z, t, param, cond).noise
    return convert_predictions(z, t, param, noise=null + w * (cnd - null))


def gaussian_flow(model: GaussianMixture, z, t_from: float, t_to: float, param: NoiseParam):
    """Exact probability-flow map for a single-component Gaussian model.

    The flow is affine: ``z_t - alpha_t mu`` scales by ``sqrt(v_t / v_s)`` with
    ``v_t = alpha_t^2 s^2 + sigma_t^2``.
    """
    if model.n_components != 1:
        raise ValueError("closed-form flow needs a single Gaussian component")
    mu, s2 = model.means[0], float(model.scales[0]) ** 2
    a0, s0 = float(param.alpha(t_from)), float(param.sigma(t_from))
    a1, s1 = float(param.alpha(t_to)), float(param.sigma(t_to))
    ratio = np.sqrt((a1 * a1 * s2 + s1 * s1) / (a0 * a0 * s2 + s0 * s0))
    return a1 * mu + (np.asarray(z, dtype=np.float64) - a0 * mu) * ratio
