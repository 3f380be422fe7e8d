"""Deep counting: a small 1-D conv net mapping a distance series to a count.

Strided same-padded convolutions (edge-replicate padding, matching the
edge handling used elsewhere) with ReLU feed a per-channel global average
pool, then a dense head produces one scalar. Pooling makes the model
length-independent, so it accepts any series at least one kernel long and
never consumes a detection threshold. Trains with L1 or L2 loss against
the true per-clip counts on raw (unsmoothed) predicted distances.
"""

from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn_core
from .dataio import DataError, DistanceSeries
from .nn_core import DenseLayer, NumericError


@dataclass(frozen=True)
class ConvCounterSpec:
    conv_layers: tuple = ((16, 7, 2), (32, 7, 2), (64, 7, 2))  # (channels, kernel, stride)
    head_sizes: tuple = ()  # hidden dense widths between the pool and the scalar
    loss: str = "l1"
    epochs: int = 30
    batch_clips: int = 8
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        conv = tuple(tuple(int(v) for v in layer) for layer in self.conv_layers)
        object.__setattr__(self, "conv_layers", conv)
        object.__setattr__(self, "head_sizes", tuple(int(s) for s in self.head_sizes))
        if not conv:
            raise ValueError("need at least one conv layer")
        for c, k, s in conv:
            if c < 1 or s < 1:
                raise ValueError("channels and stride must be >= 1")
            if k < 1 or k % 2 == 0:
                raise ValueError("kernel lengths must be odd")
        if self.loss not in ("l1", "l2"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.epochs < 1 or self.batch_clips < 1:
            raise ValueError("epochs and batch_clips must be >= 1")

    @property
    def max_kernel(self) -> int:
        return max(k for _, k, _ in self.conv_layers)


class ConvLayer:
    def __init__(self, weights, bias, stride):
        self.weights = np.asarray(weights, dtype=np.float64)  # out x in x k
        self.bias = np.asarray(bias, dtype=np.float64)
        self.stride = int(stride)

    def params(self):
        return {"weights": self.weights, "bias": self.bias}


@dataclass
class DeepCounter:
    spec: ConvCounterSpec
    convs: list
    head: list  # DenseLayers, last one emits the scalar
    train_loss_history: list = field(default_factory=list)

    @property
    def layers(self):
        return self.convs + self.head


def init_counter(spec: ConvCounterSpec, rng=None) -> DeepCounter:
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    convs = []
    c_in = 1
    for c_out, k, s in spec.conv_layers:
        w = rng.normal(0.0, np.sqrt(2.0 / (c_in * k)), size=(c_out, c_in, k))
        convs.append(ConvLayer(w, np.zeros(c_out), s))
        c_in = c_out
    head = []
    sizes = (c_in,) + spec.head_sizes + (1,)
    for i in range(len(sizes) - 1):
        w = rng.normal(0.0, np.sqrt(2.0 / sizes[i]), size=(sizes[i + 1], sizes[i]))
        head.append(DenseLayer(w, np.zeros(sizes[i + 1])))
    return DeepCounter(spec=spec, convs=convs, head=head)


def _conv_same(x, layer: ConvLayer):
    """Strided same conv with edge-replicate padding -> (y, windows, pad_left)."""
    c_in, n = x.shape
    k = layer.weights.shape[2]
    s = layer.stride
    out_len = -(-n // s)
    pad_total = max((out_len - 1) * s + k - n, 0)
    left = pad_total // 2
    x_pad = np.pad(x, ((0, 0), (left, pad_total - left)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(x_pad, k, axis=1)[:, ::s, :]
    windows = windows[:, :out_len, :]
    y = np.tensordot(layer.weights, windows, axes=([1, 2], [0, 2]))
    return y + layer.bias[:, None], windows, left


def _series_values(series):
    if isinstance(series, DistanceSeries):
        return series.values
    return np.asarray(series, dtype=np.float64)


def _forward_full(counter: DeepCounter, series, keep_cache=False):
    v = _series_values(series)
    if v.ndim != 1:
        raise ValueError("series must be 1-D")
    if v.size < counter.spec.max_kernel:
        raise ValueError(
            f"series too short ({v.size} < kernel {counter.spec.max_kernel})"
        )
    x = v[None, :]
    conv_caches = []
    for layer in counter.convs:
        y, windows, left = _conv_same(x, layer)
        mask = y > 0
        if keep_cache:
            conv_caches.append((x.shape[1], windows, left, mask))
        x = np.maximum(y, 0.0)
    pooled = x.mean(axis=1)
    h = pooled[None, :]
    head_caches = []
    for i, layer in enumerate(counter.head):
        z = h @ layer.weights.T + layer.bias
        if i < len(counter.head) - 1:
            if keep_cache:
                head_caches.append((h, z > 0))
            h = np.maximum(z, 0.0)
        else:
            if keep_cache:
                head_caches.append((h, None))
            h = z
    raw = float(h[0, 0])
    if keep_cache:
        return raw, (conv_caches, x.shape[1], head_caches)
    return raw, None


def conv_forward(counter: DeepCounter, series) -> float:
    """Raw (unrounded) count for a series of any admissible length."""
    raw, _ = _forward_full(counter, series)
    return raw


def _backward_full(counter: DeepCounter, caches, d_raw):
    conv_caches, pooled_len, head_caches = caches
    grads_head = [None] * len(counter.head)
    g = np.array([[d_raw]])
    for i in range(len(counter.head) - 1, -1, -1):
        h_in, relu_mask = head_caches[i]
        if relu_mask is not None:
            g = g * relu_mask
        grads_head[i] = {"weights": g.T @ h_in, "bias": g.sum(axis=0)}
        g = g @ counter.head[i].weights
    # through global average pooling
    g = np.repeat(g.T, pooled_len, axis=1) / pooled_len
    grads_conv = [None] * len(counter.convs)
    for i in range(len(counter.convs) - 1, -1, -1):
        layer = counter.convs[i]
        n_in, windows, left, mask = conv_caches[i]
        g = g * mask
        dw = np.tensordot(g, windows, axes=([1], [1]))
        db = g.sum(axis=1)
        grads_conv[i] = {"weights": dw, "bias": db}
        if i > 0:
            contrib = np.tensordot(g, layer.weights, axes=([0], [0]))  # n_out, c_in, k
            contrib = contrib.transpose(1, 0, 2)
            k = layer.weights.shape[2]
            s = layer.stride
            n_out = g.shape[1]
            pad_total = max((n_out - 1) * s + k - n_in, 0)
            dx_pad = np.zeros((contrib.shape[0], n_in + pad_total))
            # scatter-add each kernel tap back onto the padded axis
            for t in range(k):
                dx_pad[:, t : t + (n_out - 1) * s + 1 : s] += contrib[:, :, t]
            g = dx_pad[:, left : left + n_in].copy()
            # replicate padding folds edge gradients onto the boundary samples
            if left > 0:
                g[:, 0] += dx_pad[:, :left].sum(axis=1)
            tail = dx_pad.shape[1] - (left + n_in)
            if tail > 0:
                g[:, -1] += dx_pad[:, left + n_in :].sum(axis=1)
    return grads_conv + grads_head


def loss_and_gradients(counter: DeepCounter, series_list, counts):
    """Mean per-clip loss and parameter gradients over a batch of clips."""
    series_list = list(series_list)
    counts = np.asarray(list(counts), dtype=np.float64)
    if len(series_list) != counts.size or not series_list:
        raise ValueError("need matching, nonempty series and counts")
    total = 0.0
    grads = None
    b = len(series_list)
    for series, y in zip(series_list, counts):
        raw, caches = _forward_full(counter, series, keep_cache=True)
        diff = raw - y
        if counter.spec.loss == "l2":
            total += diff**2 / b
            d_raw = 2.0 * diff / b
        else:
            total += abs(diff) / b
            d_raw = np.sign(diff) / b
        g = _backward_full(counter, caches, d_raw)
        if grads is None:
            grads = g
        else:
            for acc, new in zip(grads, g):
                for name in acc:
                    acc[name] += new[name]
    if not np.isfinite(total):
        raise NumericError(f"non-finite loss {total}")
    return float(total), grads


def train_counter(spec: ConvCounterSpec, series_list, counts) -> DeepCounter:
    """Adam over clip minibatches for exactly spec.epochs epochs."""
    series_list = [_series_values(s) for s in series_list]
    counts = np.asarray(list(counts), dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    if not series_list:
        raise ValueError("empty training data")
    rng = np.random.default_rng(spec.seed)
    counter = init_counter(spec, rng)
    adam = nn_core._AdamState(counter.layers)
    n = len(series_list)
    for _ in range(spec.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, spec.batch_clips):
            sel = order[start : start + spec.batch_clips]
            loss, grads = loss_and_gradients(
                counter, [series_list[i] for i in sel], counts[sel]
            )
            adam.step(counter.layers, grads, spec.learning_rate)
            epoch_loss += loss * sel.size
        counter.train_loss_history.append(epoch_loss / n)
    return counter


def predict_count(counter: DeepCounter, series) -> int:
    """Round half up, floored at zero."""
    raw = conv_forward(counter, series)
    return max(int(np.floor(raw + 0.5)), 0)


def save_counter(counter: DeepCounter, path):
    blocks = []
    for i, layer in enumerate(counter.convs):
        blocks.append((f"conv{i}.weights", layer.weights))
        blocks.append((f"conv{i}.bias", layer.bias))
    for i, layer in enumerate(counter.head):
        blocks.append((f"head{i}.weights", layer.weights))
        blocks.append((f"head{i}.bias", layer.bias))
    blocks.append(("train_loss_history", np.asarray(counter.train_loss_history)))
    nn_core.write_checkpoint(path, "conv_counter", asdict(counter.spec), blocks)


def load_counter(path) -> DeepCounter:
    kind, spec_dict, blocks = nn_core.read_checkpoint(path)
    if kind != "conv_counter":
        raise DataError(f"{path}: checkpoint kind {kind!r}, expected 'conv_counter'")
    spec_dict["conv_layers"] = tuple(tuple(l) for l in spec_dict["conv_layers"])
    spec_dict["head_sizes"] = tuple(spec_dict["head_sizes"])
    spec = ConvCounterSpec(**spec_dict)
    counter = init_counter(spec)
    named = dict(blocks)
    try:
        for i, layer in enumerate(counter.convs):
            layer.weights = named[f"conv{i}.weights"].copy()
            layer.bias = named[f"conv{i}.bias"].copy()
        for i, layer in enumerate(counter.head):
            layer.weights = named[f"head{i}.weights"].copy()
            layer.bias = named[f"head{i}.bias"].copy()
    except KeyError as exc:
        raise DataError(f"{path}: missing parameter block {exc}") from exc
    counter.train_loss_history = list(named.get("train_loss_history", []))
    return counter
