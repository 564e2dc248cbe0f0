"""Spiking and leaky neuron dynamics, surrogate gradients and parameter init.

Step functions operate elementwise on arrays of any shape; per-channel
parameters are broadcast by the caller (shape ``(C, 1, 1)`` against
``(C, H, W)`` state). Parameters passed to the step functions are the
*effective* values (alpha, eta, rho0, rho1 already squashed by a sigmoid).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

MODELS = ("lif", "alif", "plif", "xlif")

# raw parameter name -> (init mean, init std); from the initialisation table
INIT = {
    "a": (-4.0, 0.1),
    "n": (-2.0, 0.1),
    "p0": (-2.0, 0.1),
    "p1": (-2.0, 0.1),
    "theta": (0.8, 0.1),
    "beta0": (0.3, 0.1),
    "beta1": (1.0, 0.1),
}
ABLATION_INIT = {"a": -4.0, "theta": 0.8}

USED_PARAMS = {
    "lif": ("a", "theta"),
    "alif": ("a", "n", "beta0", "beta1"),
    "plif": ("a", "p0", "p1", "theta"),
    "xlif": ("a", "p1", "beta0", "beta1"),
    "leaky": ("a",),
}

SIGMOID_PARAMS = ("a", "n", "p0", "p1")
LOWER_BOUNDS = {"theta": 0.01, "beta0": 0.01, "beta1": 0.0}
# keeps sigmoid(raw) strictly inside (0, 1) in float64
RAW_LIMIT = 30.0


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=np.float64)))


@dataclass
class SurrogateConfig:
    kind: str = "atan"
    gamma: float = 10.0

    def __post_init__(self):
        if self.kind not in ("atan", "superspike"):
            raise ValueError(f"unknown surrogate {self.kind!r}")
        if self.gamma <= 0:
            raise ValueError("surrogate width must be positive")


def surrogate(x, config: SurrogateConfig = SurrogateConfig()):
    """Stand-in derivative of the Heaviside spike function at ``x = U - theta``."""
    x = np.asarray(x, dtype=np.float64)
    if config.kind == "atan":
        return 1.0 / (1.0 + config.gamma * x * x)
    return 1.0 / (1.0 + config.gamma * np.abs(x)) ** 2


def spike(u, threshold):
    return (np.asarray(u) >= threshold).astype(np.float64)


@dataclass
class NeuronParams:
    """Raw per-channel neuron parameters of one layer.

    Only the parameters used by ``model`` are present in ``raw``.
    """

    model: str
    raw: dict = field(default_factory=dict)
    learnable: dict = field(default_factory=dict)

    def effective(self) -> dict:
        out = {}
        for name, value in self.raw.items():
            if name == "a":
                out["alpha"] = sigmoid(value)
            elif name == "n":
                out["eta"] = sigmoid(value)
            elif name == "p0":
                out["rho0"] = sigmoid(value)
            elif name == "p1":
                out["rho1"] = sigmoid(value)
            else:
                out[name] = np.asarray(value, dtype=np.float64)
        return out

    def clamp(self) -> "NeuronParams":
        return replace(self, raw=clamp_raw(self.raw))


def clamp_raw(raw: dict) -> dict:
    out = {}
    for name, value in raw.items():
        value = np.asarray(value, dtype=np.float64)
        if name in LOWER_BOUNDS:
            value = np.maximum(value, LOWER_BOUNDS[name])
        elif name in SIGMOID_PARAMS:
            value = np.clip(value, -RAW_LIMIT, RAW_LIMIT)
        out[name] = value
    return out


def init_params(model: str, channels: int, rng=None, ablation=False, learnable=None) -> NeuronParams:
    """Sample initial raw parameters for ``model``.

    With ``ablation=True`` every instance of a parameter starts at the same
    constant (``a = -4``, ``theta = 0.8``); other parameters keep their means.
    """
    if model not in USED_PARAMS:
        raise ValueError(f"unknown neuron model {model!r}")
    rng = np.random.default_rng() if rng is None else rng
    raw = {}
    for name in USED_PARAMS[model]:
        mean, std = INIT[name]
        if ablation:
            raw[name] = np.full(channels, ABLATION_INIT.get(name, mean))
        else:
            raw[name] = rng.normal(mean, std, size=channels)
    flags = {name: True for name in raw}
    if learnable is not None:
        flags.update({k: bool(v) for k, v in learnable.items() if k in flags})
    return NeuronParams(model, clamp_raw(raw), flags)


@dataclass
class NeuronLayerState:
    U: np.ndarray | None = None
    S: np.ndarray | None = None
    T: np.ndarray | None = None
    P: np.ndarray | None = None
    Y: np.ndarray | None = None
    # threshold applied at the previous step; only read by the soft reset
    Th: np.ndarray | None = None

    @classmethod
    def zeros(cls, shape, model="lif"):
        z = np.zeros(shape)
        st = cls(U=z.copy(), S=z.copy())
        if model == "alif":
            st.T = z.copy()
        if model in ("plif", "xlif"):
            st.P = z.copy()
        if model == "leaky":
            st = cls(Y=z.copy())
        st.Th = z.copy() if model != "leaky" else None
        return st


def _membrane(state, current, alpha, soft):
    if soft:
        return alpha * state.U + (1.0 - alpha) * current - state.S * state.Th
    return (1.0 - state.S) * alpha * state.U + (1.0 - alpha) * current


def lif_step(state: NeuronLayerState, current, alpha, theta, soft=False):
    """Hard-reset LIF update; returns ``(state', spikes)``."""
    u = _membrane(state, current, alpha, soft)
    th = np.broadcast_to(theta, u.shape)
    s = spike(u, th)
    return NeuronLayerState(U=u, S=s, Th=np.array(th)), s


def alif_step(state: NeuronLayerState, current, alpha, eta, beta0, beta1, soft=False):
    """LIF with a threshold trace driven by the neuron's own previous spikes."""
    t_new = eta * state.T + (1.0 - eta) * state.S
    th = beta0 + beta1 * t_new
    u = _membrane(state, current, alpha, soft)
    s = spike(u, th)
    return NeuronLayerState(U=u, S=s, T=t_new, Th=np.broadcast_to(th, u.shape).copy()), s


def receptive_field_pool(presyn, kernel_size=3, stride=1, out_shape=None):
    """Average of presynaptic activity over each neuron's receptive field,
    across all input channels (zero padding counts toward the average)."""
    presyn = np.asarray(presyn, dtype=np.float64)
    if presyn.ndim == 2:
        presyn = presyn[None]
    c, h, w = presyn.shape
    pad = kernel_size // 2
    ho = (h + 2 * pad - kernel_size) // stride + 1
    wo = (w + 2 * pad - kernel_size) // stride + 1
    if out_shape is not None and tuple(out_shape) != (ho, wo):
        raise ValueError(
            f"receptive field (k={kernel_size}, stride={stride}) maps {h}x{w} to {ho}x{wo}, "
            f"layer expects {out_shape[0]}x{out_shape[1]}"
        )
    xp = np.pad(presyn.sum(axis=0), pad)
    out = np.zeros((ho, wo))
    for i in range(kernel_size):
        for j in range(kernel_size):
            out += xp[i:i + stride * ho:stride, j:j + stride * wo:stride]
    return out / (c * kernel_size * kernel_size)


def receptive_field_pool_backward(grad, in_shape, kernel_size=3, stride=1):
    c, h, w = in_shape
    pad = kernel_size // 2
    ho, wo = grad.shape
    gp = np.zeros((h + 2 * pad, w + 2 * pad))
    for i in range(kernel_size):
        for j in range(kernel_size):
            gp[i:i + stride * ho:stride, j:j + stride * wo:stride] += grad
    g = gp[pad:pad + h, pad:pad + w] / (c * kernel_size * kernel_size)
    return np.broadcast_to(g, in_shape).copy()


def presynaptic_trace(P, pool, rho1):
    return rho1 * P + (1.0 - rho1) * pool


def plif_step(state: NeuronLayerState, current_raw, presyn_spikes, alpha, rho0, rho1, theta,
              kernel_size=1, stride=1, soft=False):
    """LIF whose input current is reduced by a presynaptic activity trace."""
    pool = receptive_field_pool(presyn_spikes, kernel_size, stride, out_shape=np.shape(current_raw)[-2:])
    p_new = presynaptic_trace(state.P, pool, rho1)
    current = current_raw - rho0 * p_new
    u = _membrane(state, current, alpha, soft)
    th = np.broadcast_to(theta, u.shape)
    s = spike(u, th)
    return NeuronLayerState(U=u, S=s, P=p_new, Th=np.array(th)), s


def xlif_step(state: NeuronLayerState, current, presyn_spikes, alpha, rho1, beta0, beta1,
              kernel_size=1, stride=1, soft=False):
    """LIF whose threshold adapts to a presynaptic activity trace."""
    pool = receptive_field_pool(presyn_spikes, kernel_size, stride, out_shape=np.shape(current)[-2:])
    p_new = presynaptic_trace(state.P, pool, rho1)
    th = beta0 + beta1 * p_new
    u = _membrane(state, current, alpha, soft)
    s = spike(u, th)
    return NeuronLayerState(U=u, S=s, P=p_new, Th=np.broadcast_to(th, u.shape).copy()), s


def leaky_step(state: NeuronLayerState, current, alpha):
    """Non-spiking leaky unit without reset: ``ReLU(alpha*Y + (1-alpha)*I)``."""
    y = np.maximum(0.0, alpha * state.Y + (1.0 - alpha) * current)
    return NeuronLayerState(Y=y), y
