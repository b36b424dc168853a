"""Multi-channel Lenia on a torus, parameterised by a flat vector theta.

Layout of theta (length ``4*K + M*M*C``)::

    [ mu_raw(K) | sigma_raw(K) | growth_weight_raw(K) | radius_raw(K) | patch_raw(C, M, M) ]

Every entry is unconstrained; :func:`decode_params` squashes them through a
sigmoid into valid Lenia ranges. State, kernels and the update are float32.
The convolution is accumulated in float64 and quantised to float32 resolution so
that translating the state translates the result bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.fft

from .config import LeniaConfig
from .errors import ConfigError, NumericFault

F32 = np.float32

KERNEL_PEAK = 0.5
KERNEL_WIDTH = 0.15
POTENTIAL_SCALE = 1e7


@dataclass(frozen=True)
class DecodedParams:
    mu: np.ndarray       # (K,)
    sigma: np.ndarray    # (K,)
    weight: np.ndarray   # (K,) growth weight h_k
    radius: np.ndarray   # (K,) fraction of the maximum kernel radius
    patch: np.ndarray    # (C, M, M), values in [0, 1]


@dataclass(frozen=True)
class FourierKernels:
    spectra: np.ndarray  # (K, N, N//2 + 1) complex128, rfft2 of each normalised kernel
    spatial: np.ndarray  # (K, N, N) float32, normalised kernels centred at cell (0, 0)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so large magnitudes never overflow exp.
    x = np.asarray(x, dtype=F32)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = F32(1) / (F32(1) + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (F32(1) + ex)
    return out


def as_theta(theta, config: LeniaConfig) -> np.ndarray:
    theta = np.asarray(theta, dtype=F32).reshape(-1)
    if theta.size != config.theta_length:
        raise ConfigError(
            f"theta has length {theta.size}, config expects {config.theta_length}")
    if not np.all(np.isfinite(theta)):
        raise ConfigError("theta contains non-finite entries")
    return theta


def decode_params(theta, config: LeniaConfig) -> DecodedParams:
    theta = as_theta(theta, config)
    k, m, c = config.kernel_count, config.init_patch, config.channels
    s = _sigmoid(theta)
    return DecodedParams(
        mu=s[0:k].copy(),
        sigma=F32(0.001) + s[k:2 * k] * F32(0.25),
        weight=s[2 * k:3 * k].copy(),
        radius=F32(0.1) + s[3 * k:4 * k] * F32(0.9),
        patch=s[4 * k:].reshape(c, m, m).copy(),
    )


def neutral_theta(config: LeniaConfig) -> np.ndarray:
    """Raw zeros (every decoded value at mid-range) except the kernel radii.

    Radii are set so each ring spans about a quarter of the seed patch. With
    the mid-range radius the rings outgrow a 32-cell patch on a 128 grid and
    almost every nearby parameter vector decays to the empty state.
    """
    k = config.kernel_count
    theta = np.zeros(config.theta_length, dtype=F32)
    r = min(max(config.init_patch / config.grid_size, 0.11), 0.99)
    frac = (r - 0.1) / 0.9
    theta[3 * k:4 * k] = math.log(frac / (1 - frac))
    return theta


def init_state(theta, config: LeniaConfig) -> np.ndarray:
    """Zero grid with the decoded seed patch centred in every channel."""
    decoded = theta if isinstance(theta, DecodedParams) else decode_params(theta, config)
    n, m = config.grid_size, config.init_patch
    state = np.zeros((config.channels, n, n), dtype=F32)
    lo = (n - m) // 2
    state[:, lo:lo + m, lo:lo + m] = decoded.patch
    return state


def growth(u, mu, sigma):
    """Gaussian growth mapping, 1 at ``u == mu`` and tending to -1."""
    u = np.asarray(u)
    d = (u - mu) / sigma
    return 2 * np.exp(-0.5 * d * d) - 1


def kernel_shell(q) -> np.ndarray:
    """Un-normalised ring profile at normalised radius ``q``; zero outside (0, 1)."""
    q = np.asarray(q, dtype=np.float64)
    inside = (q > 0) & (q < 1)
    val = np.exp(-0.5 * ((q - KERNEL_PEAK) / KERNEL_WIDTH) ** 2)
    return np.where(inside, val, 0.0)


def max_radius(config: LeniaConfig) -> float:
    return config.grid_size / 4


def torus_distance(n: int) -> np.ndarray:
    """Euclidean distance of each cell to cell (0, 0) on an n x n torus."""
    idx = np.arange(n)
    off = np.minimum(idx, n - idx).astype(np.float64)
    return np.sqrt(off[:, None] ** 2 + off[None, :] ** 2)


def build_kernels(decoded: DecodedParams, config: LeniaConfig) -> FourierKernels:
    n = config.grid_size
    dist = torus_distance(n)
    r_max = max_radius(config)
    spatial = np.zeros((config.kernel_count, n, n), dtype=np.float64)
    for k, r in enumerate(decoded.radius.astype(np.float64)):
        raw = kernel_shell(dist / (r * r_max))
        total = raw.sum()
        # A radius smaller than one cell has empty support; that kernel contributes nothing.
        if total > 0:
            spatial[k] = raw / total
    spatial32 = spatial.astype(F32)
    spectra = scipy.fft.rfft2(spatial32.astype(np.float64), axes=(-2, -1))
    return FourierKernels(spectra=spectra, spatial=spatial32)


def convolve(state: np.ndarray, kernels: FourierKernels, config: LeniaConfig) -> np.ndarray:
    """Potential field of every kernel applied to its source channel, shape (K, N, N)."""
    n = config.grid_size
    src = [s for s, _ in config.kernel_wiring()]
    fields = scipy.fft.rfft2(state.astype(np.float64), axes=(-2, -1))
    prod = fields[src] * kernels.spectra
    u = scipy.fft.irfft2(prod, s=(n, n), axes=(-2, -1))
    # Snap to a 1e-7 grid: float64 FFT noise (~1e-16) then almost never
    # survives, so translated inputs give translated outputs bit-for-bit. The
    # grid is non-dyadic because float32 inputs make exact dyadic potentials
    # that would sit on the half-steps of a power-of-two grid.
    return (np.rint(u * POTENTIAL_SCALE) / POTENTIAL_SCALE).astype(F32)


def convolve_direct(state: np.ndarray, kernels: FourierKernels, config: LeniaConfig) -> np.ndarray:
    """Spatial-domain circular convolution; slow, kept as a reference."""
    n = config.grid_size
    out = np.zeros((config.kernel_count, n, n), dtype=np.float64)
    for k, (src, _) in enumerate(config.kernel_wiring()):
        a = state[src].astype(np.float64)
        ker = kernels.spatial[k].astype(np.float64)
        for dy, dx in zip(*np.nonzero(ker)):
            out[k] += ker[dy, dx] * np.roll(a, shift=(dy, dx), axis=(0, 1))
    return out.astype(F32)


class _Dynamics:
    """Per-theta constants for repeated steps."""

    def __init__(self, decoded: DecodedParams, kernels: FourierKernels, config: LeniaConfig):
        c = config.channels
        targets = np.array([t for _, t in config.kernel_wiring()])
        self.config = config
        self.kernels = kernels
        self.mu = decoded.mu[:, None, None]
        self.sigma = decoded.sigma[:, None, None]
        w = decoded.weight
        sums = np.zeros(c, dtype=np.float64)
        np.add.at(sums, targets, w.astype(np.float64))
        norm = np.maximum(1.0, sums).astype(F32)
        # (C, K) mixing matrix: weight of kernel k on target channel c, pre-divided by its normaliser
        mix = np.zeros((c, config.kernel_count), dtype=F32)
        mix[targets, np.arange(config.kernel_count)] = w
        self.mix = mix / norm[:, None]
        self.targets_of = [[int(t)] for t in targets]
        self.dt = F32(config.dt)

    def step(self, state: np.ndarray, t: int | None = None) -> np.ndarray:
        u = convolve(state, self.kernels, self.config)
        g = growth(u, self.mu, self.sigma).astype(F32)
        # Elementwise accumulation in kernel order; a BLAS matmul could round
        # cells differently depending on their memory position.
        delta = np.zeros_like(state)
        for k in range(g.shape[0]):
            for c in self.targets_of[k]:
                delta[c] += self.mix[c, k] * g[k]
        out = state + self.dt * delta
        if not np.all(np.isfinite(out)):
            raise NumericFault("non-finite activation after update", step=t)
        return np.clip(out, F32(0), F32(1))


def step(state: np.ndarray, kernels: FourierKernels, decoded: DecodedParams,
         config: LeniaConfig) -> np.ndarray:
    """One synchronous clipped Euler update of every channel."""
    return _Dynamics(decoded, kernels, config).step(np.asarray(state, dtype=F32))


def render(state: np.ndarray, config: LeniaConfig | None = None) -> np.ndarray:
    """Map channels to an (N, N, 3) uint8 RGB frame.

    One channel is replicated to grey, two channels leave blue empty, more than
    three keep only the first three.
    """
    state = np.asarray(state, dtype=F32)
    c, n, _ = state.shape
    if c == 1:
        rgb = np.repeat(state, 3, axis=0)
    elif c == 2:
        rgb = np.concatenate([state, np.zeros((1, n, n), dtype=F32)], axis=0)
    else:
        rgb = state[:3]
    return np.rint(np.clip(rgb, 0, 1) * F32(255)).astype(np.uint8).transpose(1, 2, 0).copy()


def rollout(theta, config: LeniaConfig, checkpoints: Sequence[int] | None = None,
            steps: int | None = None) -> list[np.ndarray]:
    """Simulate and render the frames at ``checkpoints`` (step 0 is the initial state).

    ``checkpoints`` defaults to every step ``0..T``.
    """
    T = config.rollout_steps if steps is None else steps
    if checkpoints is None:
        checkpoints = range(T + 1)
    checkpoints = list(checkpoints)
    if any(b <= a for a, b in zip(checkpoints, checkpoints[1:])):
        raise ConfigError("checkpoints must be strictly increasing")
    if checkpoints and (checkpoints[0] < 0 or checkpoints[-1] > T):
        raise ConfigError(f"checkpoints must lie in [0, {T}]")
    decoded = decode_params(theta, config)
    dyn = _Dynamics(decoded, build_kernels(decoded, config), config)
    state = init_state(decoded, config)
    frames = []
    wanted = iter(checkpoints)
    nxt = next(wanted, None)
    last = checkpoints[-1] if checkpoints else 0
    for t in range(last + 1):
        if t > 0:
            state = dyn.step(state, t)
        if t == nxt:
            frames.append(render(state, config))
            nxt = next(wanted, None)
    return frames


def theta_to_bytes(theta) -> bytes:
    return np.asarray(theta, dtype="<f4").tobytes()


def theta_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) % 4:
        raise ConfigError(f"theta blob of {len(blob)} bytes is not a whole number of float32 values")
    return np.frombuffer(blob, dtype="<f4").astype(F32)
