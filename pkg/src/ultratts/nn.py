"""Feed-forward and recurrent regressors written directly in numpy.

Two topologies are supported:

``mlp``
    tanh hidden layers and a linear output layer, trained with minibatch SGD
    (momentum) on globally shuffled frames.
``lstm``
    tanh feed-forward layers, one unidirectional LSTM layer and a linear
    output, trained with Adam on one utterance per step (full BPTT).

The training objective is the squared error summed over output dimensions
and averaged over frames, computed on normalised targets.
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CorruptFileError, DivergedError, InvalidArgumentError
from .features import FeatureMatrix, NormStats, Segment, StreamLayout, apply_norm, invert_norm

NNET_MAGIC = b"NNET"
NNET_VERSION = 1


# ---------------------------------------------------------------------------
# configs

@dataclass
class MlpConfig:
    hidden_layers: int = 6
    hidden_width: int = 1024
    batch_size: int = 256
    base_lr: float = 0.002
    momentum: float = 0.9
    max_epochs: int = 25
    warmup_epochs: int = 10
    decay_factor: float = 0.5
    patience: int = 5
    seed: int = 0

    def validate(self):
        _validate_schedule(self)
        if self.hidden_layers < 0 or self.hidden_width < 1 or self.batch_size < 1:
            raise InvalidArgumentError("layer counts/widths and batch size must be positive")
        if not 0 <= self.momentum < 1:
            raise InvalidArgumentError("momentum must be in [0, 1)")


@dataclass
class LstmConfig:
    ff_layers: int = 4
    ff_width: int = 1024
    lstm_width: int = 512
    base_lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 40
    warmup_epochs: int = 30
    decay_factor: float = 0.5
    patience: int = 5
    seed: int = 0

    def validate(self):
        _validate_schedule(self)
        if self.ff_layers < 0 or self.ff_width < 1 or self.lstm_width < 1:
            raise InvalidArgumentError("layer counts and widths must be positive")


def _validate_schedule(cfg):
    if cfg.max_epochs < 1 or cfg.warmup_epochs < 1 or cfg.patience < 1:
        raise InvalidArgumentError("max_epochs, warmup_epochs and patience must be >= 1")
    if cfg.warmup_epochs > cfg.max_epochs:
        raise InvalidArgumentError(
            f"warmup_epochs ({cfg.warmup_epochs}) exceeds max_epochs ({cfg.max_epochs})")
    if not 0 < cfg.decay_factor < 1:
        raise InvalidArgumentError("decay_factor must be in (0, 1)")
    if cfg.base_lr <= 0:
        raise InvalidArgumentError("base_lr must be positive")


@dataclass
class TrainReport:
    epochs_run: int = 0
    best_epoch: int = 0
    best_dev_loss: float = float("inf")
    initial_dev_loss: float = float("nan")
    train_loss: list = field(default_factory=list)
    dev_loss: list = field(default_factory=list)
    learning_rate: list = field(default_factory=list)

    @property
    def final_lr(self):
        return self.learning_rate[-1] if self.learning_rate else float("nan")

    def to_dict(self):
        d = asdict(self)
        d["final_lr"] = self.final_lr
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("final_lr", None)
        return cls(**d)


# ---------------------------------------------------------------------------
# networks

def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class MLP:
    """tanh hidden layers followed by a linear output layer."""

    kind = "mlp"

    def __init__(self, sizes, rng=None):
        self.sizes = [int(s) for s in sizes]
        if len(self.sizes) < 2:
            raise InvalidArgumentError("an MLP needs at least input and output sizes")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = []
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            self.params.append(_glorot(rng, a, b))
            self.params.append(np.zeros(b))

    @property
    def n_in(self):
        return self.sizes[0]

    @property
    def n_out(self):
        return self.sizes[-1]

    def topology(self):
        return {"kind": "mlp", "sizes": self.sizes}

    def forward(self, X, cache=False):
        h = X
        acts = [h]
        n_layers = len(self.params) // 2
        for k in range(n_layers):
            W, b = self.params[2 * k], self.params[2 * k + 1]
            z = h @ W + b
            h = np.tanh(z) if k < n_layers - 1 else z
            acts.append(h)
        return (h, acts) if cache else h

    def backward(self, acts, dY):
        grads = [None] * len(self.params)
        n_layers = len(self.params) // 2
        d = dY
        for k in reversed(range(n_layers)):
            W = self.params[2 * k]
            grads[2 * k] = acts[k].T @ d
            grads[2 * k + 1] = d.sum(axis=0)
            if k > 0:
                d = (d @ W.T) * (1.0 - acts[k] ** 2)
        return grads

    def loss_and_grads(self, X, Y):
        out, acts = self.forward(X, cache=True)
        diff = out - Y
        n = X.shape[0]
        loss = float(np.einsum("ij,ij->", diff, diff)) / n
        return loss, self.backward(acts, 2.0 * diff / n)


class LSTMNet:
    """tanh feed-forward stack, one LSTM layer, linear output.

    Gate order inside the stacked weight matrices is input, forget, cell, output.
    """

    kind = "lstm"

    def __init__(self, n_in, ff_sizes, lstm_width, n_out, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in_ = int(n_in)
        self.ff_sizes = [int(s) for s in ff_sizes]
        self.H = int(lstm_width)
        self.n_out_ = int(n_out)
        self.params = []
        prev = self.n_in_
        for s in self.ff_sizes:
            self.params.append(_glorot(rng, prev, s))
            self.params.append(np.zeros(s))
            prev = s
        H = self.H
        self.params.append(_glorot(rng, prev, 4 * H))    # Wx
        self.params.append(_glorot(rng, H, 4 * H))       # Wh
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0                                 # forget-gate bias
        self.params.append(b)
        self.params.append(_glorot(rng, H, self.n_out_))
        self.params.append(np.zeros(self.n_out_))

    @property
    def n_in(self):
        return self.n_in_

    @property
    def n_out(self):
        return self.n_out_

    def topology(self):
        return {"kind": "lstm", "n_in": self.n_in_, "ff_sizes": self.ff_sizes,
                "lstm_width": self.H, "n_out": self.n_out_}

    def forward(self, X, cache=False):
        n_ff = len(self.ff_sizes)
        h = X
        ff_acts = [h]
        for k in range(n_ff):
            h = np.tanh(h @ self.params[2 * k] + self.params[2 * k + 1])
            ff_acts.append(h)
        Wx, Wh, b, Wo, bo = self.params[2 * n_ff:]
        H = self.H
        T = X.shape[0]
        Z = h @ Wx + b
        hs = np.zeros((T + 1, H))
        cs = np.zeros((T + 1, H))
        gates = np.zeros((T, 4 * H))
        for t in range(T):
            z = Z[t] + hs[t] @ Wh
            i = _sigmoid(z[:H])
            f = _sigmoid(z[H:2 * H])
            g = np.tanh(z[2 * H:3 * H])
            o = _sigmoid(z[3 * H:])
            cs[t + 1] = f * cs[t] + i * g
            hs[t + 1] = o * np.tanh(cs[t + 1])
            gates[t, :H], gates[t, H:2 * H], gates[t, 2 * H:3 * H], gates[t, 3 * H:] = i, f, g, o
        out = hs[1:] @ Wo + bo
        if cache:
            return out, (ff_acts, hs, cs, gates)
        return out

    def backward(self, cache, dY):
        ff_acts, hs, cs, gates = cache
        n_ff = len(self.ff_sizes)
        Wx, Wh, b, Wo, bo = self.params[2 * n_ff:]
        H = self.H
        T = dY.shape[0]
        grads = [None] * len(self.params)
        grads[-2] = hs[1:].T @ dY
        grads[-1] = dY.sum(axis=0)
        dH = dY @ Wo.T
        dZ = np.zeros((T, 4 * H))
        dh_next = np.zeros(H)
        dc_next = np.zeros(H)
        tanh_c = np.tanh(cs[1:])
        for t in reversed(range(T)):
            i, f, g, o = gates[t, :H], gates[t, H:2 * H], gates[t, 2 * H:3 * H], gates[t, 3 * H:]
            dh = dH[t] + dh_next
            dc = dh * o * (1.0 - tanh_c[t] ** 2) + dc_next
            dz = dZ[t]
            dz[:H] = dc * g * i * (1.0 - i)
            dz[H:2 * H] = dc * cs[t] * f * (1.0 - f)
            dz[2 * H:3 * H] = dc * i * (1.0 - g * g)
            dz[3 * H:] = dh * tanh_c[t] * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dz @ Wh.T
        h_top = ff_acts[-1]
        grads[2 * n_ff] = h_top.T @ dZ
        grads[2 * n_ff + 1] = hs[:-1].T @ dZ
        grads[2 * n_ff + 2] = dZ.sum(axis=0)
        d = dZ @ Wx.T
        for k in reversed(range(n_ff)):
            d = d * (1.0 - ff_acts[k + 1] ** 2)
            grads[2 * k] = ff_acts[k].T @ d
            grads[2 * k + 1] = d.sum(axis=0)
            if k > 0:
                d = d @ self.params[2 * k].T
        return grads

    def loss_and_grads(self, X, Y, n_norm=None):
        out, cache = self.forward(X, cache=True)
        diff = out - Y
        n = n_norm or X.shape[0]
        loss = float(np.einsum("ij,ij->", diff, diff)) / n
        return loss, self.backward(cache, 2.0 * diff / n)


def build_network(topology, rng=None):
    if topology["kind"] == "mlp":
        return MLP(topology["sizes"], rng)
    if topology["kind"] == "lstm":
        return LSTMNet(topology["n_in"], topology["ff_sizes"], topology["lstm_width"],
                       topology["n_out"], rng)
    raise InvalidArgumentError(f"unknown network kind {topology['kind']!r}")


# ---------------------------------------------------------------------------
# optimisers

class SGD:
    def __init__(self, params, momentum=0.0):
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, params, grads, lr):
        for p, g, v in zip(params, grads, self.velocity):
            v *= self.momentum
            v -= lr * g
            p += v


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# model container

@dataclass(eq=False)
class NetworkModel:
    net: object
    in_norm: NormStats
    out_norm: NormStats
    report: TrainReport = field(default_factory=TrainReport)
    out_layout: StreamLayout = None
    meta: dict = field(default_factory=dict)

    @property
    def kind(self):
        return self.net.kind

    @property
    def n_in(self):
        return self.net.n_in

    @property
    def n_out(self):
        return self.net.n_out


def _as_array(x):
    return x.frames if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=float)


def predict(model, inputs):
    """Normalise inputs, run the network, and map outputs back to target units.

    ``inputs`` is one utterance (FeatureMatrix or array); the LSTM state
    starts from zero for every call.
    """
    X = _as_array(inputs)
    if X.ndim != 2 or X.shape[1] != model.n_in:
        raise InvalidArgumentError(
            f"input width {X.shape[-1]} does not match model input width {model.n_in}")
    Xn = apply_norm(model.in_norm, X)
    out = invert_norm(model.out_norm, model.net.forward(Xn))
    if model.out_layout is not None:
        shift = inputs.frame_shift if isinstance(inputs, FeatureMatrix) else 0.005
        return FeatureMatrix(model.out_layout, out, shift)
    return out


# ---------------------------------------------------------------------------
# training

def _check_pairs(pairs, name):
    if not pairs:
        raise InvalidArgumentError(f"{name} set is empty")
    Xs = [_as_array(x) for x, _ in pairs]
    Ys = [_as_array(y) for _, y in pairs]
    for x, y in zip(Xs, Ys):
        if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
            raise InvalidArgumentError(f"{name} pair shapes disagree: {x.shape} vs {y.shape}")
    if len({x.shape[1] for x in Xs}) != 1 or len({y.shape[1] for y in Ys}) != 1:
        raise InvalidArgumentError(f"{name} set has inconsistent widths")
    return Xs, Ys


def _fit_norms(Xs, Ys, in_norm, out_norm):
    if in_norm is None:
        in_norm = _fit("minmax", Xs)
    if out_norm is None:
        out_norm = _fit("meanvar", Ys)
    return in_norm, out_norm


def _fit(mode, arrays):
    from .features import fit_norm
    return fit_norm(np.concatenate(arrays, axis=0), mode)


def _run_schedule(cfg, net, train_epoch, dev_loss):
    """Shared warm-up / decay / early-stopping loop.

    The learning rate stays at ``base_lr`` for ``warmup_epochs`` epochs. After
    that, every epoch whose dev loss does not improve on the best so far
    multiplies it by ``decay_factor``, and training stops once ``patience``
    such epochs have happened in a row.
    """
    report = TrainReport()
    report.initial_dev_loss = dev_loss()
    best = [p.copy() for p in net.params]
    lr = cfg.base_lr
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        report.learning_rate.append(lr)
        tr = train_epoch(lr)
        dv = dev_loss()
        if not (np.isfinite(tr) and np.isfinite(dv)):
            raise DivergedError(epoch, tr if not np.isfinite(tr) else dv)
        report.train_loss.append(tr)
        report.dev_loss.append(dv)
        report.epochs_run = epoch
        if dv < report.best_dev_loss:
            report.best_dev_loss = dv
            report.best_epoch = epoch
            best = [p.copy() for p in net.params]
            stale = 0
        else:
            stale += 1
        if epoch >= cfg.warmup_epochs:
            if stale >= cfg.patience:
                break
            if stale > 0:
                lr *= cfg.decay_factor
    for p, b in zip(net.params, best):
        p[...] = b
    return report


def train_mlp(train, dev, config=None, in_norm=None, out_norm=None, out_layout=None):
    """Train an MLP on lists of ``(X, Y)`` pairs (one pair per utterance).

    Returns ``(NetworkModel, TrainReport)``; the model holds the weights of
    the epoch with the lowest dev loss.
    """
    cfg = config or MlpConfig()
    cfg.validate()
    Xs, Ys = _check_pairs(train, "train")
    Xd, Yd = _check_pairs(dev, "dev")
    if Xs[0].shape[1] != Xd[0].shape[1] or Ys[0].shape[1] != Yd[0].shape[1]:
        raise InvalidArgumentError("train and dev widths differ")
    in_norm, out_norm = _fit_norms(Xs, Ys, in_norm, out_norm)
    X = apply_norm(in_norm, np.concatenate(Xs))
    Y = apply_norm(out_norm, np.concatenate(Ys))
    XD = apply_norm(in_norm, np.concatenate(Xd))
    YD = apply_norm(out_norm, np.concatenate(Yd))

    rng = np.random.default_rng(cfg.seed)
    sizes = [X.shape[1]] + [cfg.hidden_width] * cfg.hidden_layers + [Y.shape[1]]
    net = MLP(sizes, rng)
    opt = SGD(net.params, cfg.momentum)
    n = X.shape[0]

    def train_epoch(lr):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grads = net.loss_and_grads(X[idx], Y[idx])
            opt.step(net.params, grads, lr)
            total += loss * len(idx)
        return total / n

    def dev_loss():
        diff = net.forward(XD) - YD
        return float(np.einsum("ij,ij->", diff, diff)) / XD.shape[0]

    report = _run_schedule(cfg, net, train_epoch, dev_loss)
    model = NetworkModel(net, in_norm, out_norm, report, out_layout,
                         {"config": asdict(cfg)})
    return model, report


def train_lstm(train, dev, config=None, in_norm=None, out_norm=None, out_layout=None):
    """Train the FF+LSTM regressor, one utterance per Adam step."""
    cfg = config or LstmConfig()
    cfg.validate()
    Xs, Ys = _check_pairs(train, "train")
    Xd, Yd = _check_pairs(dev, "dev")
    if Xs[0].shape[1] != Xd[0].shape[1] or Ys[0].shape[1] != Yd[0].shape[1]:
        raise InvalidArgumentError("train and dev widths differ")
    in_norm, out_norm = _fit_norms(Xs, Ys, in_norm, out_norm)
    Xs = [apply_norm(in_norm, x) for x in Xs]
    Ys = [apply_norm(out_norm, y) for y in Ys]
    Xd = [apply_norm(in_norm, x) for x in Xd]
    Yd = [apply_norm(out_norm, y) for y in Yd]
    n_dev_frames = sum(len(x) for x in Xd)

    rng = np.random.default_rng(cfg.seed)
    net = LSTMNet(Xs[0].shape[1], [cfg.ff_width] * cfg.ff_layers, cfg.lstm_width,
                  Ys[0].shape[1], rng)
    opt = Adam(net.params, cfg.beta1, cfg.beta2, cfg.eps)
    n_frames = sum(len(x) for x in Xs)

    def train_epoch(lr):
        total = 0.0
        for u in rng.permutation(len(Xs)):
            loss, grads = net.loss_and_grads(Xs[u], Ys[u])
            opt.step(net.params, grads, lr)
            total += loss * len(Xs[u])
        return total / n_frames

    def dev_loss():
        total = 0.0
        for x, y in zip(Xd, Yd):
            diff = net.forward(x) - y
            total += float(np.einsum("ij,ij->", diff, diff))
        return total / n_dev_frames

    report = _run_schedule(cfg, net, train_epoch, dev_loss)
    model = NetworkModel(net, in_norm, out_norm, report, out_layout,
                         {"config": asdict(cfg)})
    return model, report


def dataset_loss(model, pairs):
    """Frame-averaged summed squared error of ``model`` on normalised targets."""
    total, n = 0.0, 0
    for x, y in pairs:
        out = model.net.forward(apply_norm(model.in_norm, _as_array(x)))
        diff = out - apply_norm(model.out_norm, _as_array(y))
        total += float(np.einsum("ij,ij->", diff, diff))
        n += diff.shape[0]
    return total / n


# ---------------------------------------------------------------------------
# gradient check

def gradient_check(topology, seed=0, n_frames=5, step=1e-5):
    """Largest relative gap between backprop and central finite differences.

    ``topology`` is a dict as returned by ``net.topology()``. The relative
    error of each parameter entry is ``|a - n| / max(|a| + |n|, 1e-6)``.
    """
    rng = np.random.default_rng(seed)
    net = build_network(topology, rng)
    for p in net.params:
        p += rng.normal(0.0, 0.1, size=p.shape)
    X = rng.normal(size=(n_frames, net.n_in))
    Y = rng.normal(size=(n_frames, net.n_out))
    _, grads = net.loss_and_grads(X, Y)

    worst = 0.0
    for p, g in zip(net.params, grads):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            lp, _ = net.loss_and_grads(X, Y)
            flat[j] = orig - step
            lm, _ = net.loss_and_grads(X, Y)
            flat[j] = orig
            num = (lp - lm) / (2 * step)
            err = abs(gflat[j] - num) / max(abs(gflat[j]) + abs(num), 1e-6)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# persistence

def _layout_to_list(layout):
    if layout is None:
        return None
    return [[s.name, s.width, s.has_deltas] for s in layout.segments]


def _layout_from_list(items):
    if items is None:
        return None
    return StreamLayout(tuple(Segment(n, w, bool(d)) for n, w, d in items))


def save_model(model, path):
    tensors = list(model.net.params) + [model.in_norm.a, model.in_norm.b,
                                        model.out_norm.a, model.out_norm.b]
    header = {
        "topology": model.net.topology(),
        "shapes": [list(t.shape) for t in tensors],
        "in_norm": {"mode": model.in_norm.mode, "lo": model.in_norm.lo, "hi": model.in_norm.hi},
        "out_norm": {"mode": model.out_norm.mode, "lo": model.out_norm.lo, "hi": model.out_norm.hi},
        "report": model.report.to_dict(),
        "out_layout": _layout_to_list(model.out_layout),
        "meta": model.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(NNET_MAGIC)
        f.write(struct.pack("<HI", NNET_VERSION, len(blob)))
        f.write(blob)
        for t in tensors:
            f.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_model(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != NNET_MAGIC:
        raise CorruptFileError(f"{path}: not an NNET model file")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != NNET_VERSION:
        raise CorruptFileError(f"{path}: unsupported model version {version}")
    header = json.loads(data[10:10 + hlen].decode("utf-8"))
    off = 10 + hlen
    tensors = []
    for shape in header["shapes"]:
        n = int(np.prod(shape)) if shape else 1
        if off + 8 * n > len(data):
            raise CorruptFileError(f"{path}: truncated tensor data")
        tensors.append(np.frombuffer(data, "<f8", n, off).astype(float).reshape(shape))
        off += 8 * n
    if off != len(data):
        raise CorruptFileError(f"{path}: {len(data) - off} trailing bytes")
    net = build_network(header["topology"])
    n_p = len(net.params)
    for p, t in zip(net.params, tensors[:n_p]):
        if p.shape != t.shape:
            raise CorruptFileError(f"{path}: tensor shape {t.shape} does not fit {p.shape}")
        p[...] = t
    ia, ib, oa, ob = tensors[n_p:]
    hi, ho = header["in_norm"], header["out_norm"]
    return NetworkModel(
        net,
        NormStats(hi["mode"], ia, ib, hi["lo"], hi["hi"]),
        NormStats(ho["mode"], oa, ob, ho["lo"], ho["hi"]),
        TrainReport.from_dict(header["report"]),
        _layout_from_list(header["out_layout"]),
        header["meta"],
    )
