"""Feed-forward MLP trained by online back-propagation.

Parameters live in one flat buffer (per layer: row-major weight matrix,
then biases) with numpy views carved on top, so snapshots, checkpoints and
finite-difference probing all operate on a single array.  The hot
single-sample update is a compiled kernel over that buffer; training runs
in single precision with double-precision loss accumulation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .config import rng_for
from .mnist_io import Dataset

CHECKPOINT_MAGIC = b"CFN1"
CHECKPOINT_VERSION = 1

ACTIVATIONS = ("scaled_tanh", "tanh")
OUTPUTS = ("softmax", "tanh_mse")

# LeCun-style scaled tanh keeps unit-variance activations well inside the
# linear region, which conditions the gradients of deep stacks
SCALED_TANH_GAIN = 1.7159
SCALED_TANH_SLOPE = 2.0 / 3.0

_SHUFFLE_TAG = 0x5861F  # epoch visit-order stream
_INIT_TAG = 0x1A17     # weight init stream


class TrainingDiverged(RuntimeError):
    pass


def parameter_count(layer_sizes) -> int:
    """Closed-form parameter count: sum of n_in*n_out + n_out per layer."""
    return sum(a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


def _validate_arch(layer_sizes):
    if len(layer_sizes) < 2:
        raise ValueError("architecture needs at least input and output layers")
    if any(int(s) <= 0 for s in layer_sizes):
        raise ValueError(f"layer sizes must be positive, got {layer_sizes}")


class Network:
    """MLP parameters plus the activation/output configuration."""

    def __init__(self, layer_sizes, params: np.ndarray,
                 activation: str = "scaled_tanh", output: str = "softmax"):
        _validate_arch(layer_sizes)
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if output not in OUTPUTS:
            raise ValueError(f"output must be one of {OUTPUTS}")
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        if params.shape != (parameter_count(self.layer_sizes),):
            raise ValueError(f"expected {parameter_count(self.layer_sizes)} parameters, got {params.shape}")
        self.params = params
        self.activation = activation
        self.output = output
        self._carve_views()

    def _carve_views(self):
        self.weights = []
        self.biases = []
        offset = 0
        self._woff, self._boff = [], []
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            self._woff.append(offset)
            self.weights.append(self.params[offset:offset + n_in * n_out].reshape(n_out, n_in))
            offset += n_in * n_out
            self._boff.append(offset)
            self.biases.append(self.params[offset:offset + n_out])
            offset += n_out

    @property
    def dtype(self):
        return self.params.dtype

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def copy(self) -> "Network":
        return Network(self.layer_sizes, self.params.copy(), self.activation, self.output)

    def astype(self, dtype) -> "Network":
        return Network(self.layer_sizes, self.params.astype(dtype), self.activation, self.output)


def init_network(layer_sizes, seed: int, init_range: float = 0.05,
                 activation: str = "scaled_tanh", output: str = "softmax",
                 dtype=np.float32) -> Network:
    """Fresh network: weights i.i.d. uniform in [-init_range, init_range], zero biases."""
    _validate_arch(layer_sizes)
    rng = rng_for(seed, _INIT_TAG)
    chunks = []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        chunks.append(rng.uniform(-init_range, init_range, n_in * n_out))
        chunks.append(np.zeros(n_out))
    params = np.concatenate(chunks).astype(dtype)
    return Network(layer_sizes, params, activation, output)


def _act(net: Network, z: np.ndarray) -> np.ndarray:
    if net.activation == "scaled_tanh":
        return SCALED_TANH_GAIN * np.tanh(SCALED_TANH_SLOPE * z)
    return np.tanh(z)


def _act_deriv(net: Network, z: np.ndarray) -> np.ndarray:
    if net.activation == "scaled_tanh":
        t = np.tanh(SCALED_TANH_SLOPE * z)
        return SCALED_TANH_GAIN * SCALED_TANH_SLOPE * (1.0 - t * t)
    t = np.tanh(z)
    return 1.0 - t * t


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_trace(net: Network, x: np.ndarray):
    """Forward pass keeping per-layer preactivations and activations."""
    acts = [np.asarray(x, dtype=net.dtype)]
    pres = []
    for l in range(net.n_layers):
        z = net.weights[l] @ acts[-1] + net.biases[l]
        pres.append(z)
        if l == net.n_layers - 1:
            acts.append(_softmax(z) if net.output == "softmax" else np.tanh(z))
        else:
            acts.append(_act(net, z))
    return acts, pres


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Class scores for one input; softmax output sums to 1."""
    x = np.asarray(x).reshape(-1)
    if x.shape[0] != net.layer_sizes[0]:
        raise ValueError(f"input size {x.shape[0]} != {net.layer_sizes[0]}")
    return _forward_trace(net, x)[0][-1]


def forward_batch(net: Network, inputs: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Row-wise forward over an (n, input_size) matrix."""
    inputs = np.asarray(inputs, dtype=net.dtype)
    outs = []
    for lo in range(0, len(inputs), chunk):
        a = inputs[lo:lo + chunk]
        for l in range(net.n_layers):
            z = a @ net.weights[l].T + net.biases[l]
            if l == net.n_layers - 1:
                a = _softmax(z) if net.output == "softmax" else np.tanh(z)
            else:
                a = _act(net, z)
        outs.append(a)
    return np.concatenate(outs)


def sample_loss(net: Network, x: np.ndarray, label: int) -> float:
    """Loss of one sample under the net's output config (no update)."""
    acts, pres = _forward_trace(net, np.asarray(x).reshape(-1))
    return _loss_from_output(net, pres[-1], acts[-1], label)


def _loss_from_output(net: Network, logits, out, label: int) -> float:
    if net.output == "softmax":
        shifted = logits - logits.max()
        return float(np.log(np.exp(shifted).sum()) - shifted[label])
    target = np.full(out.shape, -1.0, dtype=out.dtype)
    target[label] = 1.0
    return float(0.5 * np.sum((out - target) ** 2))


def loss_and_grad(net: Network, x: np.ndarray, label: int):
    """Analytic loss and flat gradient for one sample; net is not modified."""
    x = np.asarray(x, dtype=net.dtype).reshape(-1)
    acts, pres = _forward_trace(net, x)
    loss = _loss_from_output(net, pres[-1], acts[-1], label)
    grad = np.zeros_like(net.params)
    gnet = Network(net.layer_sizes, grad, net.activation, net.output)

    if net.output == "softmax":
        delta = acts[-1].copy()
        delta[label] -= 1.0
    else:
        target = np.full(acts[-1].shape, -1.0, dtype=net.dtype)
        target[label] = 1.0
        delta = (acts[-1] - target) * (1.0 - acts[-1] ** 2)
    for l in range(net.n_layers - 1, -1, -1):
        gnet.weights[l][:] = np.outer(delta, acts[l])
        gnet.biases[l][:] = delta
        if l > 0:
            delta = (net.weights[l].T @ delta) * _act_deriv(net, pres[l - 1])
    return loss, grad


@njit(cache=True, fastmath=True)
def _online_step(params, sizes, woff, boff, aoff, poff, acts, pres, x, label, lr, act_id):
    n_layers = sizes.shape[0] - 1
    for i in range(sizes[0]):
        acts[i] = x[i]
    # forward
    for l in range(n_layers):
        n_in = sizes[l]
        n_out = sizes[l + 1]
        wo = woff[l]
        ain = aoff[l]
        aout = aoff[l + 1]
        po = poff[l]
        for o in range(n_out):
            s = np.float32(0.0)
            base = wo + o * n_in
            for i in range(n_in):
                s += params[base + i] * acts[ain + i]
            z = s + params[boff[l] + o]
            pres[po + o] = z
            if l == n_layers - 1:
                acts[aout + o] = z
            elif act_id == 0:
                acts[aout + o] = 1.7159 * np.tanh(0.6666666666666666 * z)
            else:
                acts[aout + o] = np.tanh(z)
    # softmax + cross-entropy on the output layer
    n_out = sizes[n_layers]
    aout = aoff[n_layers]
    po = poff[n_layers - 1]
    m = acts[aout]
    pred = 0
    for o in range(1, n_out):
        if acts[aout + o] > m:
            m = acts[aout + o]
            pred = o
    tot = np.float32(0.0)
    for o in range(n_out):
        e = np.exp(acts[aout + o] - m)
        acts[aout + o] = e
        tot += e
    loss = np.log(tot) - (pres[po + label] - m)
    for o in range(n_out):
        p = acts[aout + o] / tot
        acts[aout + o] = p
        pres[po + o] = p - (np.float32(1.0) if o == label else np.float32(0.0))
    # backward: propagate deltas, then update each layer in place
    for l in range(n_layers - 1, -1, -1):
        n_in = sizes[l]
        n_out = sizes[l + 1]
        wo = woff[l]
        ain = aoff[l]
        po = poff[l]
        if l > 0:
            pprev = poff[l - 1]
            for i in range(n_in):
                s = np.float32(0.0)
                for o in range(n_out):
                    s += params[wo + o * n_in + i] * pres[po + o]
                z = pres[pprev + i]
                if act_id == 0:
                    t = np.tanh(0.6666666666666666 * z)
                    fp = 1.7159 * 0.6666666666666666 * (np.float32(1.0) - t * t)
                else:
                    t = np.tanh(z)
                    fp = np.float32(1.0) - t * t
                pres[pprev + i] = s * fp
        for o in range(n_out):
            d = lr * pres[po + o]
            base = wo + o * n_in
            for i in range(n_in):
                params[base + i] -= d * acts[ain + i]
            params[boff[l] + o] -= d
    return loss, pred


class _Scratch:
    """Per-network buffers and offset tables for the compiled step."""

    def __init__(self, net: Network):
        sizes = np.asarray(net.layer_sizes, dtype=np.int64)
        self.sizes = sizes
        self.woff = np.asarray(net._woff, dtype=np.int64)
        self.boff = np.asarray(net._boff, dtype=np.int64)
        aoff = np.zeros(len(sizes), dtype=np.int64)
        aoff[1:] = np.cumsum(sizes[:-1])
        self.aoff = aoff
        poff = np.zeros(len(sizes) - 1, dtype=np.int64)
        poff[1:] = np.cumsum(sizes[1:-1])
        self.poff = poff
        self.acts = np.empty(int(sizes.sum()), dtype=np.float32)
        self.pres = np.empty(int(sizes[1:].sum()), dtype=np.float32)


def _kernel_eligible(net: Network) -> bool:
    return net.dtype == np.float32 and net.output == "softmax"


def _step_python(net: Network, x, label: int, lr: float):
    """Reference single-sample update; used for float64 nets and ablations."""
    acts, pres = _forward_trace(net, x)
    loss = _loss_from_output(net, pres[-1], acts[-1], label)
    pred = int(np.argmax(acts[-1]))
    if net.output == "softmax":
        delta = acts[-1].copy()
        delta[label] -= 1.0
    else:
        target = np.full(acts[-1].shape, -1.0, dtype=net.dtype)
        target[label] = 1.0
        delta = (acts[-1] - target) * (1.0 - acts[-1] ** 2)
    for l in range(net.n_layers - 1, -1, -1):
        prev_delta = None
        if l > 0:
            prev_delta = (net.weights[l].T @ delta) * _act_deriv(net, pres[l - 1])
        net.weights[l] -= lr * np.outer(delta, acts[l])
        net.biases[l] -= lr * delta
        delta = prev_delta
    return loss, pred


def train_step(net: Network, x: np.ndarray, label: int, lr: float,
               scratch: _Scratch | None = None):
    """One online gradient step; updates net in place, returns (loss, prediction)."""
    x = np.ascontiguousarray(np.asarray(x).reshape(-1), dtype=net.dtype)
    if x.shape[0] != net.layer_sizes[0]:
        raise ValueError(f"input size {x.shape[0]} != {net.layer_sizes[0]}")
    if _kernel_eligible(net):
        scratch = scratch or _Scratch(net)
        act_id = 0 if net.activation == "scaled_tanh" else 1
        loss, pred = _online_step(net.params, scratch.sizes, scratch.woff, scratch.boff,
                                  scratch.aoff, scratch.poff, scratch.acts, scratch.pres,
                                  x, int(label), np.float32(lr), act_id)
    else:
        loss, pred = _step_python(net, x, int(label), lr)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss}")
    return float(loss), int(pred)


@dataclass
class TrainConfig:
    """Schedule for online training: lr decays by a fixed factor each epoch."""

    learning_rate: float = 1e-3
    lr_decay: float = 0.97
    epochs: int = 30
    shuffle_seed: int = 0
    validate_every: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** epoch


@dataclass
class EpochStats:
    epoch: int
    lr: float
    mean_loss: float
    train_error_pct: float


def train_epoch(net: Network, ds: Dataset, cfg: TrainConfig, epoch: int = 0) -> EpochStats:
    """One shuffled online pass over the dataset.

    The visit order depends only on (shuffle_seed, epoch), so the same
    seeds reproduce the same pass regardless of how many epochs ran
    before or how the arrays are laid out in memory.
    """
    inputs = ds.pixels.reshape(len(ds), -1)
    if inputs.shape[1] != net.layer_sizes[0]:
        raise ValueError(f"dataset images ({inputs.shape[1]} px) do not match input layer "
                         f"({net.layer_sizes[0]})")
    order = rng_for(cfg.shuffle_seed, _SHUFFLE_TAG, epoch).permutation(len(ds))
    lr = cfg.lr_at(epoch)
    scratch = _Scratch(net) if _kernel_eligible(net) else None
    labels = ds.labels
    total = 0.0  # double accumulator
    misses = 0
    for i in order:
        loss, pred = train_step(net, inputs[i], int(labels[i]), lr, scratch)
        total += loss
        if pred != labels[i]:
            misses += 1
    return EpochStats(epoch, lr, total / len(ds), 100.0 * misses / len(ds))


@dataclass
class EvalResult:
    error_pct: float
    n_miss: int
    predictions: np.ndarray   # (n,) top-1 class per sample
    top2: np.ndarray          # (n, 2) two highest-scoring classes, ties to lower index
    top2_scores: np.ndarray   # (n, 2)
    miss_indices: np.ndarray

    def __len__(self):
        return len(self.predictions)


def rank_top2(scores: np.ndarray):
    """Top-2 classes per row; equal scores resolve to the lower class index."""
    order = np.argsort(-scores, axis=1, kind="stable")
    top2 = order[:, :2]
    return top2, np.take_along_axis(scores, top2, axis=1)


def evaluate_scores(scores: np.ndarray, labels: np.ndarray) -> EvalResult:
    top2, top2_scores = rank_top2(scores)
    predictions = top2[:, 0]
    miss = predictions != labels
    return EvalResult(
        error_pct=100.0 * miss.sum() / len(labels),
        n_miss=int(miss.sum()),
        predictions=predictions,
        top2=top2,
        top2_scores=top2_scores,
        miss_indices=np.nonzero(miss)[0],
    )


def evaluate(net: Network, ds: Dataset) -> EvalResult:
    """Error rate plus per-sample top-2 predictions over a dataset."""
    scores = forward_batch(net, ds.pixels.reshape(len(ds), -1))
    return evaluate_scores(scores, ds.labels)


def save_checkpoint(net: Network, path: str | Path, meta: dict | None = None) -> Path:
    """Versioned binary checkpoint plus a text sidecar (path + '.meta.json').

    Layout: magic, u32 version, u32 layer count, u32 layer sizes, then per
    layer the row-major float32 weights followed by the biases, all
    little-endian.
    """
    path = Path(path)
    sizes = net.layer_sizes
    header = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(sizes))
    header += struct.pack(f"<{len(sizes)}I", *sizes)
    with open(path, "wb") as fh:
        fh.write(header)
        for w, b in zip(net.weights, net.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    sidecar = {
        "format_version": CHECKPOINT_VERSION,
        "layer_sizes": list(sizes),
        "activation": net.activation,
        "output": net.output,
    }
    sidecar.update(meta or {})
    Path(str(path) + ".meta.json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[Network, dict]:
    """Load a checkpoint and its sidecar metadata (empty dict if missing)."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    version, n_sizes = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    sizes = struct.unpack_from(f"<{n_sizes}I", blob, 12)
    offset = 12 + 4 * n_sizes
    params = np.empty(parameter_count(sizes), dtype=np.float32)
    pos = 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        for count in (n_in * n_out, n_out):
            chunk = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            params[pos:pos + count] = chunk
            offset += 4 * count
            pos += count
    meta_path = Path(str(path) + ".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    net = Network(sizes, params,
                  activation=meta.get("activation", "scaled_tanh"),
                  output=meta.get("output", "softmax"))
    return net, meta
