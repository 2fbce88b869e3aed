"""
DDPM noise schedule, forward noising, reverse posterior step and the
epsilon-prediction loss.

Timesteps are 1-based: ``t`` runs over ``1..T`` and ``alpha_bar[t - 1]`` is
the cumulative product up to and including step ``t``.

All functions work on numpy arrays and torch tensors alike; the schedule
itself is kept in float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

try:
    import torch
except ImportError:  # pragma: no cover
    torch = None

Timestep = Union[int, np.ndarray, "torch.Tensor"]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float
    beta_end: float

    def to_text(self) -> str:
        """Plain key = value serialisation (reconstructed via ``from_text``)."""
        return f"T = {self.T}\nbeta_start = {self.beta_start!r}\nbeta_end = {self.beta_end!r}\n"

    @classmethod
    def from_text(cls, text: str) -> "NoiseSchedule":
        values = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
        try:
            return make_linear_schedule(
                int(values["T"]), float(values["beta_start"]), float(values["beta_end"])
            )
        except KeyError as exc:
            raise ValueError(f"schedule text is missing key {exc}") from None

    def as_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise ValueError("beta endpoints must lie in (0, 1)")
    if beta_start > beta_end:
        raise ValueError("beta_start must not exceed beta_end")
    T = int(T)
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar, beta_start=float(beta_start), beta_end=float(beta_end))


def _check_t(t: Timestep, T: int) -> np.ndarray:
    if torch is not None and isinstance(t, torch.Tensor):
        arr = t.detach().cpu().numpy()
    else:
        arr = np.asarray(t)
    if arr.size == 0 or np.any(arr < 1) or np.any(arr > T):
        raise ValueError(f"timestep out of range [1, {T}]: {t}")
    return arr.astype(np.int64)


def _gather(values: np.ndarray, t: Timestep, like):
    """Pick schedule entries at ``t`` and shape them to broadcast over ``like``."""
    idx = _check_t(t, len(values))
    picked = values[idx - 1]
    if picked.ndim == 0:
        return float(picked)
    # per-sample timesteps along the leading axis
    shape = (-1,) + (1,) * (like.ndim - 1)
    if torch is not None and isinstance(like, torch.Tensor):
        return torch.as_tensor(picked, dtype=like.dtype, device=like.device).reshape(shape)
    return picked.reshape(shape)


def _same_shape(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


@dataclass
class NoisyState:
    x_t: object
    t: Timestep
    eps: object = None


def forward_sample(x0, t: Timestep, eps, sched: NoiseSchedule) -> NoisyState:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    _same_shape(x0, eps, "forward_sample")
    abar = _gather(sched.alpha_bar, t, x0)
    x_t = abar ** 0.5 * x0 + (1.0 - abar) ** 0.5 * eps
    return NoisyState(x_t=x_t, t=t, eps=eps)


def posterior_step(x_t, eps_hat, t: Timestep, sched: NoiseSchedule, z=None):
    """One reverse step x_t -> x_{t-1} with variance fixed to beta_t.

    ``z`` is ignored wherever ``t == 1`` so the final step is the
    deterministic mean.
    """
    _same_shape(x_t, eps_hat, "posterior_step")
    beta = _gather(sched.beta, t, x_t)
    abar = _gather(sched.alpha_bar, t, x_t)
    mean = (x_t - beta / (1.0 - abar) ** 0.5 * eps_hat) / (1.0 - beta) ** 0.5
    if z is None:
        return mean
    _same_shape(x_t, z, "posterior_step")
    tt = _check_t(t, sched.T)
    not_last = (tt > 1).astype(np.float64)
    if not_last.ndim == 0:
        if not_last == 0.0:
            return mean
        return mean + beta ** 0.5 * z
    shape = (-1,) + (1,) * (x_t.ndim - 1)
    if torch is not None and isinstance(x_t, torch.Tensor):
        gate = torch.as_tensor(not_last, dtype=x_t.dtype, device=x_t.device).reshape(shape)
    else:
        gate = not_last.reshape(shape)
    return mean + gate * beta ** 0.5 * z


def denoising_loss(eps_true, eps_hat):
    """Mean squared error over every element."""
    _same_shape(eps_true, eps_hat, "denoising_loss")
    return ((eps_true - eps_hat) ** 2).mean()


def mask_to_signed(mask):
    """{0, 1} mask -> {-1, +1} diffusion target."""
    return mask * 2.0 - 1.0


def signed_to_mask(x):
    """Threshold a signed sample at zero."""
    return x > 0
