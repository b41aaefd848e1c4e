"""The early-warning TCN: three temporal blocks, global average pooling, dense + softmax."""
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import core
from .core import make_rng

KINDS = ("causal_conv1d", "layer_norm", "relu", "spatial_dropout",
         "global_avg_pool", "dense", "softmax")


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass
class TcnConfig:
    n_timesteps: int = 24
    n_features: int = 34
    n_blocks: int = 3
    filters: int = 64
    kernel_size: int = 3
    dilations: list = field(default_factory=lambda: [1, 2, 4])
    convs_per_block: int = 2
    dropout_rate: float = 0.10
    learning_rate: float = 0.001
    batch_size: int = 200
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    use_norm: bool = True
    class_weighting: bool = True

    @property
    def receptive_field(self):
        return 1 + self.convs_per_block * (self.kernel_size - 1) * sum(self.dilations)

    def validate(self):
        if len(self.dilations) != self.n_blocks:
            raise ConfigError("need one dilation per block")
        if self.kernel_size < 1 or min(self.dilations) < 1:
            raise ConfigError("kernel_size and dilations must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.receptive_field < self.n_timesteps:
            raise ConfigError(
                f"receptive field {self.receptive_field} < {self.n_timesteps} time steps")


@dataclass
class LayerSpec:
    kind: str
    kernel_size: int = 0
    dilation: int = 0
    in_channels: int = 0
    out_channels: int = 0
    dropout_rate: float = 0.0


@dataclass
class Layer:
    spec: LayerSpec
    params: dict = field(default_factory=dict)


@dataclass
class ForwardCache:
    """Per-layer inputs and auxiliaries of one (batched) forward pass."""
    inputs: list
    aux: list
    logits: np.ndarray
    probs: np.ndarray


@dataclass
class TcnNetwork:
    config: TcnConfig
    layers: list
    cache: ForwardCache = None

    def parameters(self):
        return [p for layer in self.layers for _, p in sorted(layer.params.items())]

    def parameter_names(self):
        return [f"{i}.{name}" for i, layer in enumerate(self.layers)
                for name in sorted(layer.params)]

    def n_parameters(self):
        return sum(p.size for p in self.parameters())

    def copy(self):
        layers = [Layer(LayerSpec(**asdict(l.spec)), {k: v.copy() for k, v in l.params.items()})
                  for l in self.layers]
        return TcnNetwork(TcnConfig(**asdict(self.config)), layers)

    def set_parameters(self, values):
        for p, v in zip(self.parameters(), values):
            p[...] = v


def build_network(config, rng=None):
    config.validate()
    rng = make_rng(config.seed if rng is None else rng)
    layers = []
    cin = config.n_features
    f = config.filters
    for d in config.dilations:
        for _ in range(config.convs_per_block):
            K = config.kernel_size
            fan_in = K * cin
            layers.append(Layer(
                LayerSpec("causal_conv1d", kernel_size=K, dilation=d, in_channels=cin, out_channels=f),
                {"w": core.he_init(rng, (K, cin, f), fan_in), "b": np.zeros(f)}))
            layers.append(Layer(LayerSpec("relu", in_channels=f, out_channels=f)))
            layers.append(Layer(LayerSpec("spatial_dropout", in_channels=f, out_channels=f,
                                          dropout_rate=config.dropout_rate)))
            if config.use_norm:
                layers.append(Layer(LayerSpec("layer_norm", in_channels=f, out_channels=f),
                                    {"gain": np.ones(f), "shift": np.zeros(f)}))
            cin = f
    layers.append(Layer(LayerSpec("global_avg_pool", in_channels=f, out_channels=f)))
    layers.append(Layer(LayerSpec("dense", in_channels=f, out_channels=2),
                        {"w": core.he_init(rng, (f, 2), f), "b": np.zeros(2)}))
    layers.append(Layer(LayerSpec("softmax", in_channels=2, out_channels=2)))
    return TcnNetwork(config, layers)


def count_parameters(config):
    """Closed-form parameter count for ``build_network(config)``."""
    total = 0
    cin = config.n_features
    for _ in config.dilations:
        for _ in range(config.convs_per_block):
            total += config.kernel_size * cin * config.filters + config.filters
            if config.use_norm:
                total += 2 * config.filters
            cin = config.filters
    return total + config.filters * 2 + 2


def _check_input(x, config):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (config.n_timesteps, config.n_features):
        raise InputError(f"expected grids of shape ({config.n_timesteps}, {config.n_features}),"
                         f" got {x.shape[1:]}")
    if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
        raise InputError("input must be imputed and scaled to [0, 1]")
    return x


def run_forward(net, x, training=False, rng=None, check=True):
    """Batched forward pass returning a fresh :class:`ForwardCache` (``net`` is untouched)."""
    x = _check_input(x, net.config) if check else np.asarray(x, dtype=np.float64)
    inputs, aux = [], []
    h = x
    logits = probs = None
    for layer in net.layers:
        s, p = layer.spec, layer.params
        inputs.append(h)
        a = None
        if s.kind == "causal_conv1d":
            h = core.causal_conv1d_forward(h, p["w"], p["b"], s.dilation)
        elif s.kind == "relu":
            h = core.relu(h)
        elif s.kind == "spatial_dropout":
            h, a = core.spatial_dropout(h, s.dropout_rate, rng, training)
        elif s.kind == "layer_norm":
            h, a = core.layer_norm_forward(h, p["gain"], p["shift"])
        elif s.kind == "global_avg_pool":
            h = core.global_avg_pool(h)
        elif s.kind == "dense":
            h = h @ p["w"] + p["b"]
            logits = h
        elif s.kind == "softmax":
            h = core.softmax(h)
            probs = h
        else:
            raise ConfigError(f"unknown layer kind {s.kind}")
        aux.append(a)
    return ForwardCache(inputs, aux, logits, probs)


def forward(net, x, training=False, rng=None, check=True):
    """P(positive) per sample; the activation cache is kept on ``net`` for :func:`backward`."""
    net.cache = run_forward(net, x, training, rng, check)
    return net.cache.probs[:, 1]


def backward(net, labels, sample_weights=None, cache=None):
    """Gradients of sum_i weight_i * CE_i / B for the cached batch.

    Returns a list aligned with ``net.parameters()``.
    """
    cache = cache if cache is not None else net.cache
    if cache is None:
        raise RuntimeError("backward called without a cached forward pass")
    labels = np.asarray(labels)
    B = cache.probs.shape[0]
    w = np.ones(B) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    onehot = np.zeros((B, 2))
    onehot[np.arange(B), labels] = 1.0
    # softmax + CE fused; the clamp is inactive for any probability above 1e-15
    g = (cache.probs - onehot) * (w / B)[:, None]
    grads = {}
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        s, p = layer.spec, layer.params
        xin = cache.inputs[i]
        if s.kind == "softmax":
            continue
        if s.kind == "dense":
            grads[i] = {"w": xin.T @ g, "b": g.sum(axis=0)}
            g = g @ p["w"].T
        elif s.kind == "global_avg_pool":
            T = xin.shape[1]
            g = np.repeat(g[:, None, :] / T, T, axis=1)
        elif s.kind == "layer_norm":
            g, gg, gs = core.layer_norm_backward(g, p["gain"], cache.aux[i])
            grads[i] = {"gain": gg, "shift": gs}
        elif s.kind == "spatial_dropout":
            if cache.aux[i] is not None:
                g = g * cache.aux[i]
        elif s.kind == "relu":
            g = core.relu_backward(xin, g)
        elif s.kind == "causal_conv1d":
            gx, gw, gb = core.causal_conv1d_backward(xin, p["w"], s.dilation, g)
            grads[i] = {"w": gw, "b": gb}
            g = gx
    return [grads[i][name] for i, layer in enumerate(net.layers) for name in sorted(layer.params)]


def batch_loss(net, x, labels, sample_weights=None, training=False, rng=None):
    forward(net, x, training=training, rng=rng, check=False)
    ce = core.cross_entropy(net.cache.probs, labels)
    w = np.ones(len(ce)) if sample_weights is None else np.asarray(sample_weights)
    return float(np.sum(w * ce) / len(ce))


def predict_risk(net, x, batch_size=1000):
    """P(positive) for one grid (scalar) or a batch (array); dropout is off."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    xb = x[None] if single else x
    out = np.concatenate([forward(net, xb[i:i + batch_size])
                          for i in range(0, len(xb), batch_size)]) if len(xb) else np.zeros(0)
    return float(out[0]) if single else out


@dataclass
class TrainRun:
    train_loss: list
    val_loss: list
    best_epoch: int
    weights: list


def class_weights(labels):
    labels = np.asarray(labels)
    n = len(labels)
    counts = np.bincount(labels, minlength=2).astype(np.float64)
    w = np.where(counts > 0, n / (2.0 * np.maximum(counts, 1.0)), 0.0)
    return w


def train(net, train_x, train_y, val_x, val_y, config=None, log=None):
    """Mini-batch Adam on class-weighted cross entropy with early stopping on validation loss.

    The caller keeps train and validation patient-disjoint.  ``net`` ends up
    holding the best-validation weights, which are also returned in the run.
    """
    config = config or net.config
    train_x = _check_input(train_x, net.config)
    val_x = _check_input(val_x, net.config)
    train_y = np.asarray(train_y, dtype=np.int64)
    val_y = np.asarray(val_y, dtype=np.int64)
    if len(train_y) == 0 or len(val_y) == 0:
        raise ValueError("empty training or validation split")
    # a class absent from training contributes no gradient either way; validation is
    # balanced on its own labels so subsampled training negatives do not skew early stopping
    tw = class_weights(train_y)[train_y] if config.class_weighting else np.ones(len(train_y))
    vw = class_weights(val_y)[val_y] if config.class_weighting else np.ones(len(val_y))
    rng = make_rng([config.seed, 1])
    state = core.AdamState(learning_rate=config.learning_rate)
    params = net.parameters()
    best = (np.inf, -1, [p.copy() for p in params])
    run = TrainRun([], [], -1, [])
    since_best = 0
    n = len(train_y)
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            total += batch_loss(net, train_x[idx], train_y[idx], tw[idx], training=True, rng=rng) * len(idx)
            core.adam_step(params, backward(net, train_y[idx], tw[idx]), state)
        run.train_loss.append(total / n)
        vl = evaluate_loss(net, val_x, val_y, vw)
        run.val_loss.append(vl)
        if log:
            log(f"epoch {epoch}: train {run.train_loss[-1]:.5f} val {vl:.5f}")
        if vl < best[0]:
            best = (vl, epoch, [p.copy() for p in params])
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    net.set_parameters(best[2])
    net.cache = None
    run.best_epoch = best[1]
    run.weights = best[2]
    return run


def evaluate_loss(net, x, y, weights=None, batch_size=1000):
    total = 0.0
    for i in range(0, len(y), batch_size):
        w = None if weights is None else weights[i:i + batch_size]
        total += batch_loss(net, x[i:i + batch_size], y[i:i + batch_size], w) * len(y[i:i + batch_size])
    net.cache = None
    return total / len(y)


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------
#
#   bytes 0..7    magic b"XEWSTCN\x00"
#   bytes 8..11   format version, uint32 little endian
#   bytes 12..19  header length H, uint64 little endian
#   next H bytes  UTF-8 JSON header: {"config", "layers": [{"spec", "params": [[name, shape]...]}], "extra"}
#   remainder     every parameter array in header order, float64 little endian, C order
#
# ``extra`` carries caller metadata (feature scaler, illness, horizon).

MAGIC = b"XEWSTCN\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(net, path, extra=None):
    layers = []
    blobs = []
    for layer in net.layers:
        names = sorted(layer.params)
        layers.append({"spec": asdict(layer.spec),
                       "params": [[n, list(layer.params[n].shape)] for n in names]})
        blobs.extend(np.ascontiguousarray(layer.params[n], dtype="<f8").tobytes() for n in names)
    header = json.dumps({"config": asdict(net.config), "layers": layers, "extra": extra or {}},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Returns (network, extra)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a TCN checkpoint")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen])
    offset = 20 + hlen
    layers = []
    for entry in header["layers"]:
        params = {}
        for name, shape in entry["params"]:
            n = int(np.prod(shape)) if shape else 1
            params[name] = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
            offset += 8 * n
        layers.append(Layer(LayerSpec(**entry["spec"]), params))
    return TcnNetwork(TcnConfig(**header["config"]), layers), header["extra"]
