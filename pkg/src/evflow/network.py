"""Toy FireNet-family networks with hand-written BPTT.

Every layer exposes ``forward(params, x, state) -> (y, state', cache)`` and
``backward(params, cache, gy, gstate) -> (gx, gstate_prev, grads)`` where
``gstate`` holds the gradients flowing back from the next timestep into the
state this step produced. The spike function's derivative is replaced by the
configured surrogate; everything else is differentiated exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import neurons as nrn
from .neurons import NeuronLayerState, SurrogateConfig

VARIANTS = ("stateless", "rnn", "leaky", "lif", "alif", "plif", "xlif")
KINDS = ("conv", "convrnn_ann", "convrnn_snn", "prediction")
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------


def _out_size(n, k, stride):
    return (n + 2 * (k // 2) - k) // stride + 1


def conv2d_forward(x, weights, bias=None, stride=1):
    """Cross-correlation with zero padding ``k // 2`` (size-preserving at stride 1).

    ``x`` is ``(C_in, H, W)``, ``weights`` is ``(C_out, C_in, k, k)``.
    """
    x = np.asarray(x, dtype=np.float64)
    cout, cin, kh, kw = weights.shape
    if x.ndim != 3 or x.shape[0] != cin:
        raise ValueError(f"input shape {x.shape} does not match weights {weights.shape}")
    ho, wo = _out_size(x.shape[1], kh, stride), _out_size(x.shape[2], kw, stride)
    xp = np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    out = np.zeros((cout, ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
            out += np.tensordot(weights[:, :, i, j], patch, axes=(1, 0))
    if bias is not None:
        out += bias[:, None, None]
    return out


def conv2d_backward(grad_out, x, weights, stride=1, need_input=True):
    """Gradients of :func:`conv2d_forward` w.r.t. weights, bias and input."""
    cout, cin, kh, kw = weights.shape
    _, ho, wo = grad_out.shape
    xp = np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    gw = np.zeros_like(weights)
    gxp = np.zeros_like(xp) if need_input else None
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
            gw[:, :, i, j] = np.tensordot(grad_out, xp[sl], axes=([1, 2], [1, 2]))
            if need_input:
                gxp[sl] += np.tensordot(weights[:, :, i, j], grad_out, axes=(0, 0))
    gb = grad_out.sum(axis=(1, 2))
    gx = None
    if need_input:
        gx = gxp[:, kh // 2:kh // 2 + x.shape[1], kw // 2:kw // 2 + x.shape[2]]
    return gw, gb, gx


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class LayerSpec:
    kind: str
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    activation: str = "relu"
    bias: bool = True
    name: str = ""

    @property
    def spiking(self) -> bool:
        return self.activation.startswith("spike:")

    @property
    def neuron_model(self) -> str | None:
        if self.spiking:
            return self.activation.split(":", 1)[1]
        if self.activation == "leaky":
            return "leaky"
        return None

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"{self.name}: unknown layer kind {self.kind!r}")
        if self.spiking and self.neuron_model not in nrn.MODELS:
            raise ConfigError(f"{self.name}: unknown neuron model {self.neuron_model!r}")
        if self.spiking and self.bias:
            raise ConfigError(f"{self.name}: spiking layers have no bias")
        if self.kind == "convrnn_snn" and not self.spiking:
            raise ConfigError(f"{self.name}: convrnn_snn needs a spike:<model> activation")
        if self.kind == "convrnn_ann" and self.spiking:
            raise ConfigError(f"{self.name}: convrnn_ann cannot spike")
        if self.kind == "prediction" and self.activation != "tanh":
            raise ConfigError(f"{self.name}: prediction layer uses tanh")
        if self.kind == "conv" and self.activation not in ("relu", "leaky") and not self.spiking:
            raise ConfigError(f"{self.name}: unsupported conv activation {self.activation!r}")


@dataclass
class NetworkConfig:
    layers: list
    variant: str
    sensor_size: tuple
    learnable: dict = field(default_factory=lambda: {k: True for k in nrn.INIT})
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    soft_reset: bool = False
    ablation_init: bool = False

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        names = set()
        for spec in self.layers:
            spec.validate()
            if spec.name in names:
                raise ConfigError(f"duplicate layer name {spec.name!r}")
            names.add(spec.name)
        if self.variant == "stateless":
            for spec in self.layers:
                if spec.kind.startswith("convrnn") or spec.neuron_model is not None:
                    raise ConfigError("stateless variant cannot contain stateful layers")
        if self.layers[-1].kind != "prediction" or self.layers[-1].out_channels != 2:
            raise ConfigError("last layer must be a 2-channel prediction layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_channels != b.in_channels:
                raise ConfigError(f"channel mismatch between {a.name} and {b.name}")

    def to_dict(self):
        d = asdict(self)
        d["sensor_size"] = list(self.sensor_size)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            layers=[LayerSpec(**spec) for spec in d["layers"]],
            variant=d["variant"],
            sensor_size=tuple(d["sensor_size"]),
            learnable=dict(d.get("learnable", {})),
            surrogate=SurrogateConfig(**d.get("surrogate", {})),
            soft_reset=bool(d.get("soft_reset", False)),
            ablation_init=bool(d.get("ablation_init", False)),
        )


def _snn_variant(variant):
    return variant in nrn.MODELS


def firenet_config(variant="lif", sensor_size=(32, 32), channels=8, encoders=3, recurrent=1,
                   surrogate=None, learnable=None, soft_reset=False, ablation_init=False) -> NetworkConfig:
    """Layer list for a FireNet-style network: encoders, recurrent cells, 1x1 prediction."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    snn = _snn_variant(variant)
    layers = []
    cin = 2
    for i in range(encoders):
        if snn:
            act, bias = f"spike:{variant}", False
        elif variant == "leaky":
            act, bias = "leaky", True
        else:
            act, bias = "relu", True
        layers.append(LayerSpec("conv", cin, channels, 3, 1, act, bias, f"E{i + 1}"))
        cin = channels
    for i in range(recurrent):
        name = f"R{i + 1}"
        if variant == "stateless":
            layers.append(LayerSpec("conv", cin, channels, 3, 1, "relu", True, name))
        elif snn:
            layers.append(LayerSpec("convrnn_snn", cin, channels, 3, 1, f"spike:{variant}", False, name))
        else:
            layers.append(LayerSpec("convrnn_ann", cin, channels, 3, 1, "relu", True, name))
        cin = channels
    layers.append(LayerSpec("prediction", cin, 2, 1, 1, "tanh", not snn, "P"))
    flags = {k: True for k in nrn.INIT}
    if learnable:
        flags.update(learnable)
    cfg = NetworkConfig(layers, variant, tuple(sensor_size), flags,
                        surrogate or SurrogateConfig(), soft_reset, ablation_init)
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# weight initialisation
# --------------------------------------------------------------------------


def init_bound(kind, c_in, k=3):
    """Half-width of the uniform initialisation for a layer family."""
    if kind == "ann":
        return 1.0 / np.sqrt(c_in * k * k)
    if kind == "snn":
        return 1.0 / np.sqrt(c_in)
    if kind == "snn_prediction":
        return 0.01
    raise ValueError(f"unknown init kind {kind!r}")


def init_weights(shape, kind, rng):
    cout, cin, k, _ = shape
    b = init_bound(kind, cin, k)
    return rng.uniform(-b, b, size=shape)


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


def _chan(v):
    return np.asarray(v, dtype=np.float64)[:, None, None]


def _csum(g):
    return np.asarray(g).sum(axis=(1, 2))


class Layer:
    spiking = False

    def __init__(self, spec: LayerSpec, in_shape):
        self.spec = spec
        self.name = spec.name
        self.in_shape = in_shape
        self.out_shape = (_out_size(in_shape[0], spec.kernel, spec.stride),
                          _out_size(in_shape[1], spec.kernel, spec.stride))

    def p(self, key):
        return f"{self.name}.{key}"

    def init_params(self, rng, snn):
        raise NotImplementedError

    def init_state(self):
        return {}


class ReluConv(Layer):
    def init_params(self, rng, snn):
        s = self.spec
        shape = (s.out_channels, s.in_channels, s.kernel, s.kernel)
        out = {self.p("w"): init_weights(shape, "ann", rng)}
        if s.bias:
            b = init_bound("ann", s.in_channels, s.kernel)
            out[self.p("b")] = rng.uniform(-b, b, size=s.out_channels)
        return out

    def forward(self, P, x, state):
        z = conv2d_forward(x, P[self.p("w")], P.get(self.p("b")), self.spec.stride)
        y = np.maximum(z, 0.0)
        return y, {}, {"x": x, "z": z}

    def backward(self, P, cache, gy, gstate):
        gz = gy * (cache["z"] > 0)
        gw, gb, gx = conv2d_backward(gz, cache["x"], P[self.p("w")], self.spec.stride)
        grads = {self.p("w"): gw}
        if self.spec.bias:
            grads[self.p("b")] = gb
        return gx, {}, grads


class LeakyConv(ReluConv):
    """Stateful leaky ReLU unit (no reset)."""

    def init_params(self, rng, snn):
        out = super().init_params(rng, snn)
        out[self.p("a")] = rng.normal(*nrn.INIT["a"], size=self.spec.out_channels)
        return out

    def init_state(self):
        return {"Y": np.zeros((self.spec.out_channels,) + self.out_shape)}

    def forward(self, P, x, state):
        current = conv2d_forward(x, P[self.p("w")], P.get(self.p("b")), self.spec.stride)
        alpha = _chan(nrn.sigmoid(P[self.p("a")]))
        new, y = nrn.leaky_step(NeuronLayerState(Y=state["Y"]), current, alpha)
        z = alpha * state["Y"] + (1.0 - alpha) * current
        return y, {"Y": new.Y}, {"x": x, "I": current, "z": z, "Yp": state["Y"], "alpha": alpha}

    def backward(self, P, cache, gy, gstate):
        alpha = cache["alpha"]
        gz = (gy + gstate.get("Y", 0.0)) * (cache["z"] > 0)
        g_alpha = _csum(gz * (cache["Yp"] - cache["I"]))
        gI = gz * (1.0 - alpha)
        gw, gb, gx = conv2d_backward(gI, cache["x"], P[self.p("w")], self.spec.stride)
        a = alpha[:, 0, 0]
        grads = {self.p("w"): gw, self.p("a"): g_alpha * a * (1 - a)}
        if self.spec.bias:
            grads[self.p("b")] = gb
        return gx, {"Y": gz * alpha}, grads


class ConvRNNAnn(Layer):
    """``h = tanh(W_ff*x + W_rec*h_prev)``, ``y = ReLU(W_out*h)``."""

    def init_params(self, rng, snn):
        s = self.spec
        c, k = s.out_channels, s.kernel
        out = {
            self.p("w"): init_weights((c, s.in_channels, k, k), "ann", rng),
            self.p("w_rec"): init_weights((c, c, k, k), "ann", rng),
            self.p("w_out"): init_weights((c, c, k, k), "ann", rng),
        }
        if s.bias:
            for key, cin in (("b", s.in_channels), ("b_rec", c), ("b_out", c)):
                b = init_bound("ann", cin, k)
                out[self.p(key)] = rng.uniform(-b, b, size=c)
        return out

    def init_state(self):
        return {"h": np.zeros((self.spec.out_channels,) + self.out_shape)}

    def forward(self, P, x, state):
        s = self.spec
        a = conv2d_forward(x, P[self.p("w")], P.get(self.p("b")), s.stride)
        a += conv2d_forward(state["h"], P[self.p("w_rec")], P.get(self.p("b_rec")))
        h = np.tanh(a)
        zo = conv2d_forward(h, P[self.p("w_out")], P.get(self.p("b_out")))
        y = np.maximum(zo, 0.0)
        return y, {"h": h}, {"x": x, "hp": state["h"], "h": h, "zo": zo}

    def backward(self, P, cache, gy, gstate):
        s = self.spec
        gzo = gy * (cache["zo"] > 0)
        gw_out, gb_out, gh = conv2d_backward(gzo, cache["h"], P[self.p("w_out")])
        gh = gh + gstate.get("h", 0.0)
        ga = gh * (1.0 - cache["h"] ** 2)
        gw, gb, gx = conv2d_backward(ga, cache["x"], P[self.p("w")], s.stride)
        gw_rec, gb_rec, gh_prev = conv2d_backward(ga, cache["hp"], P[self.p("w_rec")])
        grads = {self.p("w"): gw, self.p("w_rec"): gw_rec, self.p("w_out"): gw_out}
        if s.bias:
            grads.update({self.p("b"): gb, self.p("b_rec"): gb_rec, self.p("b_out"): gb_out})
        return gx, {"h": gh_prev}, grads


class SpikingConv(Layer):
    """Spiking convolution (optionally with recurrent weights) for LIF/ALIF/PLIF/XLIF."""

    spiking = True

    def __init__(self, spec, in_shape, surrogate: SurrogateConfig, soft_reset=False):
        super().__init__(spec, in_shape)
        self.model = spec.neuron_model
        self.recurrent = spec.kind == "convrnn_snn"
        self.surrogate = surrogate
        self.soft = soft_reset

    def init_params(self, rng, snn, ablation=False, learnable=None):
        s = self.spec
        c, k = s.out_channels, s.kernel
        out = {self.p("w"): init_weights((c, s.in_channels, k, k), "snn", rng)}
        if self.recurrent:
            out[self.p("w_rec")] = init_weights((c, c, k, k), "snn", rng)
        params = nrn.init_params(self.model, c, rng, ablation=ablation)
        for key, value in params.raw.items():
            out[self.p(key)] = value
        return out

    def neuron_params(self, P):
        raw = {key: P[self.p(key)] for key in nrn.USED_PARAMS[self.model]}
        eff = nrn.NeuronParams(self.model, raw).effective()
        return {key: _chan(v) for key, v in eff.items()}

    def init_state(self):
        shape = (self.spec.out_channels,) + self.out_shape
        st = {"U": np.zeros(shape), "S": np.zeros(shape), "Th": np.zeros(shape)}
        if self.model == "alif":
            st["T"] = np.zeros(shape)
        if self.model in ("plif", "xlif"):
            st["P"] = np.zeros(shape)
            st["X"] = np.zeros((self.spec.in_channels,) + self.in_shape)
        return st

    def forward(self, P, x, state):
        s = self.spec
        eff = self.neuron_params(P)
        current = conv2d_forward(x, P[self.p("w")], None, s.stride)
        if self.recurrent:
            current += conv2d_forward(state["S"], P[self.p("w_rec")])
        prev = NeuronLayerState(U=state["U"], S=state["S"], T=state.get("T"), P=state.get("P"),
                                Th=state["Th"])
        cache = {"x": x, "I_raw": current, "prev": prev, "eff": eff}
        alpha = eff["alpha"]
        if self.model == "lif":
            new, spk = nrn.lif_step(prev, current, alpha, eff["theta"], self.soft)
            cache["I"] = current
        elif self.model == "alif":
            new, spk = nrn.alif_step(prev, current, alpha, eff["eta"], eff["beta0"], eff["beta1"], self.soft)
            cache["I"] = current
        elif self.model == "plif":
            # trace driven by the presynaptic spikes of the previous step
            new, spk = nrn.plif_step(prev, current, state["X"], alpha, eff["rho0"], eff["rho1"],
                                     eff["theta"], s.kernel, s.stride, self.soft)
            cache["I"] = current - eff["rho0"] * new.P
        else:
            new, spk = nrn.xlif_step(prev, current, state["X"], alpha, eff["rho1"], eff["beta0"],
                                     eff["beta1"], s.kernel, s.stride, self.soft)
            cache["I"] = current
        if self.model in ("plif", "xlif"):
            cache["pool"] = nrn.receptive_field_pool(state["X"], s.kernel, s.stride)
        cache["new"] = new
        out_state = {"U": new.U, "S": new.S, "Th": new.Th}
        if new.T is not None:
            out_state["T"] = new.T
        if new.P is not None:
            out_state["P"] = new.P
            out_state["X"] = x
        return spk, out_state, cache

    def backward(self, P, cache, gy, gstate):
        s = self.spec
        eff = cache["eff"]
        prev, new = cache["prev"], cache["new"]
        alpha = eff["alpha"]
        zero = 0.0
        gS = gy + gstate.get("S", zero)
        sg = nrn.surrogate(new.U - new.Th, self.surrogate)
        gU = gstate.get("U", zero) + gS * sg
        gth = -gS * sg + gstate.get("Th", zero)

        g_prev = {}
        if self.soft:
            g_prev["U"] = gU * alpha
            gS_prev = -gU * prev.Th
            g_prev["Th"] = -gU * prev.S
            g_alpha = _csum(gU * (prev.U - cache["I"]))
        else:
            g_prev["U"] = gU * (1.0 - prev.S) * alpha
            gS_prev = -gU * alpha * prev.U
            g_alpha = _csum(gU * ((1.0 - prev.S) * prev.U - cache["I"]))
        gI = gU * (1.0 - alpha)

        grads = {}
        a = alpha[:, 0, 0]
        grads[self.p("a")] = g_alpha * a * (1.0 - a)
        gP = gstate.get("P", zero)
        if self.model in ("lif", "plif"):
            grads[self.p("theta")] = _csum(np.broadcast_to(gth, new.U.shape))
        elif self.model == "alif":
            grads[self.p("beta0")] = _csum(gth)
            grads[self.p("beta1")] = _csum(gth * new.T)
            gT = gstate.get("T", zero) + gth * eff["beta1"]
            eta = eff["eta"]
            g_prev["T"] = gT * eta
            gS_prev = gS_prev + gT * (1.0 - eta)
            e = eta[:, 0, 0]
            grads[self.p("n")] = _csum(gT * (prev.T - prev.S)) * e * (1.0 - e)
        elif self.model == "xlif":
            grads[self.p("beta0")] = _csum(gth)
            grads[self.p("beta1")] = _csum(gth * new.P)
            gP = gP + gth * eff["beta1"]

        gI_raw = gI
        if self.model == "plif":
            r0 = eff["rho0"][:, 0, 0]
            grads[self.p("p0")] = _csum(-gI * new.P) * r0 * (1.0 - r0)
            gP = gP - gI * eff["rho0"]
        if self.model in ("plif", "xlif"):
            rho1 = eff["rho1"]
            g_prev["P"] = gP * rho1
            r1 = rho1[:, 0, 0]
            grads[self.p("p1")] = _csum(gP * (prev.P - cache["pool"])) * r1 * (1.0 - r1)
            gpool = np.sum(gP * (1.0 - rho1), axis=0)
            g_prev["X"] = nrn.receptive_field_pool_backward(gpool, cache["x"].shape, s.kernel, s.stride)

        gw, _, gx = conv2d_backward(gI_raw, cache["x"], P[self.p("w")], s.stride)
        grads[self.p("w")] = gw
        if self.recurrent:
            gw_rec, _, gS_rec = conv2d_backward(gI_raw, prev.S, P[self.p("w_rec")])
            grads[self.p("w_rec")] = gw_rec
            gS_prev = gS_prev + gS_rec
        if "X" in gstate:
            gx = gx + gstate["X"]
        g_prev["S"] = gS_prev
        return gx, g_prev, grads


class Prediction(Layer):
    """1x1 convolution with TanH; output is masked to event pixels by the network."""

    def init_params(self, rng, snn):
        s = self.spec
        shape = (s.out_channels, s.in_channels, s.kernel, s.kernel)
        out = {self.p("w"): init_weights(shape, "snn_prediction" if snn else "ann", rng)}
        if s.bias:
            b = init_bound("ann", s.in_channels, s.kernel)
            out[self.p("b")] = rng.uniform(-b, b, size=s.out_channels)
        return out

    def forward(self, P, x, state):
        z = conv2d_forward(x, P[self.p("w")], P.get(self.p("b")), self.spec.stride)
        y = np.tanh(z)
        return y, {}, {"x": x, "y": y}

    def backward(self, P, cache, gy, gstate):
        gz = gy * (1.0 - cache["y"] ** 2)
        gw, gb, gx = conv2d_backward(gz, cache["x"], P[self.p("w")], self.spec.stride)
        grads = {self.p("w"): gw}
        if self.spec.bias:
            grads[self.p("b")] = gb
        return gx, {}, grads


def make_layer(spec: LayerSpec, in_shape, config: NetworkConfig) -> Layer:
    if spec.kind == "prediction":
        return Prediction(spec, in_shape)
    if spec.kind == "convrnn_ann":
        return ConvRNNAnn(spec, in_shape)
    if spec.spiking:
        return SpikingConv(spec, in_shape, config.surrogate, config.soft_reset)
    if spec.activation == "leaky":
        return LeakyConv(spec, in_shape)
    return ReluConv(spec, in_shape)


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------


@dataclass
class StepRecord:
    caches: list
    mask: np.ndarray
    activity: list


@dataclass
class Context:
    """Recurrent state and BPTT tape of one sequence."""

    state: list
    tape: list = field(default_factory=list)


class Network:
    def __init__(self, config: NetworkConfig, params: dict | None = None, seed: int | None = 0):
        config.validate()
        self.config = config
        self.layers: list[Layer] = []
        shape = tuple(config.sensor_size)
        for spec in config.layers:
            layer = make_layer(spec, shape, config)
            self.layers.append(layer)
            shape = layer.out_shape
        if shape != tuple(config.sensor_size):
            raise ConfigError("network output resolution must match the sensor")
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        self.ctx = self.new_context()

    def _init_params(self, rng):
        snn = _snn_variant(self.config.variant)
        params = {}
        for layer in self.layers:
            if isinstance(layer, SpikingConv):
                params.update(layer.init_params(rng, snn, ablation=self.config.ablation_init))
            else:
                params.update(layer.init_params(rng, snn))
        return params

    # -- parameters ----------------------------------------------------

    def is_learnable(self, name) -> bool:
        key = name.split(".", 1)[1]
        if key in nrn.INIT:
            return bool(self.config.learnable.get(key, True))
        return True

    def layer_of(self, name) -> str:
        return name.split(".", 1)[0]

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def clamp(self):
        """Re-apply neuron parameter bounds after an optimiser update."""
        for name in list(self.params):
            key = name.split(".", 1)[1]
            if key in nrn.INIT:
                self.params[name] = nrn.clamp_raw({key: self.params[name]})[key]

    @property
    def spiking_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.spiking]

    @property
    def hidden_layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers[:-1]]

    # -- state ---------------------------------------------------------

    def new_context(self) -> Context:
        return Context([layer.init_state() for layer in self.layers])

    def reset_state(self, ctx: Context | None = None):
        ctx = ctx or self.ctx
        ctx.state = [layer.init_state() for layer in self.layers]
        ctx.tape.clear()

    def detach_state(self, ctx: Context | None = None):
        """Cut the graph: state values persist, the recorded history is dropped."""
        ctx = ctx or self.ctx
        ctx.tape.clear()

    # -- forward / backward --------------------------------------------

    def forward(self, counts, ctx: Context | None = None, record=True):
        """Run one timestep on a ``(2, H, W)`` count grid.

        Returns the masked flow ``(2, H, W)`` and the per-layer fraction of
        nonzero activations (hidden layers only).
        """
        ctx = ctx or self.ctx
        x = np.asarray(counts, dtype=np.float64)
        mask = (x.sum(axis=0) > 0).astype(np.float64)
        caches, new_state, activity = [], [], []
        for layer, state in zip(self.layers, ctx.state):
            x, st, cache = layer.forward(self.params, x, state)
            caches.append(cache)
            new_state.append(st)
            if layer is not self.layers[-1]:
                activity.append(float(np.count_nonzero(x)) / x.size)
        flow = x * mask
        ctx.state = new_state
        if record:
            ctx.tape.append(StepRecord(caches, mask, activity))
        return flow, activity

    def backward(self, flow_grads, activity_grads=None, ctx: Context | None = None) -> dict:
        """Reverse-mode gradients through the recorded timesteps.

        ``flow_grads[k]`` is dLoss/dflow at step k; ``activity_grads[k][l]``
        (optional) is dLoss/d(activity fraction) of hidden layer l at step k,
        honoured for spiking layers. Gradients do not cross the first
        recorded step (the detach boundary).
        """
        ctx = ctx or self.ctx
        tape = ctx.tape
        if len(flow_grads) != len(tape):
            raise TapeError(f"{len(flow_grads)} flow gradients for {len(tape)} recorded steps")
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        gstates = [{} for _ in self.layers]
        for k in range(len(tape) - 1, -1, -1):
            rec = tape[k]
            gy = np.asarray(flow_grads[k], dtype=np.float64) * rec.mask
            for li in range(len(self.layers) - 1, -1, -1):
                layer = self.layers[li]
                if activity_grads is not None and layer.spiking:
                    g_frac = activity_grads[k][li]
                    if g_frac:
                        size = layer.spec.out_channels * layer.out_shape[0] * layer.out_shape[1]
                        gy = gy + g_frac / size
                gx, gprev, g = layer.backward(self.params, rec.caches[li], gy, gstates[li])
                for name, value in g.items():
                    grads[name] += value
                gstates[li] = gprev
                gy = gx
        for name in grads:
            if not self.is_learnable(name):
                grads[name][...] = 0.0
        return grads

    # -- persistence ---------------------------------------------------

    def save(self, path):
        meta = {"version": CHECKPOINT_VERSION, "config": self.config.to_dict()}
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path) -> "Network":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            params = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
        return cls(NetworkConfig.from_dict(meta["config"]), params=params)

    def copy(self) -> "Network":
        return Network(self.config, params={k: v.copy() for k, v in self.params.items()})


def build_toy_firenet(variant="lif", sensor_size=(32, 32), seed=0, **kwargs) -> Network:
    """Desk-scale FireNet: 3 encoders of 8 channels, 1 recurrent cell, 1x1 prediction."""
    return Network(firenet_config(variant, sensor_size, **kwargs), seed=seed)


def build_firenet(variant="lif", sensor_size=(128, 128), seed=0, **kwargs) -> Network:
    """Full-size FireNet layout: 5 encoders and 2 recurrent cells of 32 channels."""
    kwargs.setdefault("channels", 32)
    kwargs.setdefault("encoders", 5)
    kwargs.setdefault("recurrent", 2)
    return Network(firenet_config(variant, sensor_size, **kwargs), seed=seed)
