"""The two network topologies and a shared mini-batch training loop.

``CNN``: three conv/ReLU/pool stages (4, 4, 8 filters of length 9, pooling
window 3 stride 2), flatten, dense(8), dropout(0.5), dense(2), softmax.

``CnnLstm``: the CNN trunk applied with shared weights to each of ``tau``
consecutive windows, an LSTM of ``q`` units over the resulting features,
then dense, dropout(0.2), dense(2), softmax on the final output.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .dataio import Dataset, SequenceDataset
from .layers import Conv1D, Dense, Dropout, Flatten, Pool1D, ReLU, pool_output_length, softmax, softmax_xent
from .lstm import LstmCell
from .optim import ParamSet, check_compatible, load_params, save_params
from .tensorcore import DTYPE, Rng, as_tensor

CNN_FILTERS = (4, 4, 8)
FILTER_LENGTH = 9
POOL_WINDOW = 3
POOL_STRIDE = 2
THRESHOLD = 0.5


class ConfigError(ValueError):
    pass


class NumericError(ArithmeticError):
    """Training produced a non-finite loss."""


def pooled_lengths(nu: int, stages: int = 3, window: int = POOL_WINDOW, stride: int = POOL_STRIDE):
    lengths = []
    n = nu
    for _ in range(stages):
        if n < window:
            raise ConfigError(f"window length {nu} too short for {stages} pooling stages")
        n = pool_output_length(n, window, stride)
        lengths.append(n)
    return lengths


class CNN:
    def __init__(self, c: int, nu: int, filters=CNN_FILTERS, filter_length: int = FILTER_LENGTH,
                 pool_mode: str = "max", hidden: int = 8, dropout: float = 0.5,
                 rng: Rng | None = None, init_std: float | str = "he", head_init_std: float = 0.01):
        self.lengths = pooled_lengths(nu, len(filters))
        self.config = {"arch": "cnn", "c": c, "nu": nu, "filters": list(filters),
                       "filter_length": filter_length, "pool_mode": pool_mode,
                       "hidden": hidden, "dropout": dropout, "init_std": init_std,
                       "head_init_std": head_init_std}
        rng = rng or Rng(0)
        self.trunk = []
        self.named = []
        in_ch = c
        for k, f in enumerate(filters, start=1):
            conv = Conv1D(in_ch, f, filter_length, rng.child(k), init_std)
            self.trunk += [conv, ReLU(), Pool1D(POOL_WINDOW, POOL_STRIDE, pool_mode)]
            self.named.append((f"conv{k}", conv))
            in_ch = f
        self.trunk.append(Flatten())
        self.d = filters[-1] * self.lengths[-1]
        self.fc1 = Dense(self.d, hidden, rng.child(10), init_std)
        self.drop = Dropout(dropout, rng.child(11))
        self.fc2 = Dense(hidden, 2, rng.child(12), head_init_std)  # near-zero logits at start
        self.head = [self.fc1, self.drop, self.fc2]
        self.named += [("fc1", self.fc1), ("fc2", self.fc2)]
        self.params = ParamSet((f"{n}.{k}", v) for n, layer in self.named for k, v in layer.params.items())

    @property
    def conv_param_names(self):
        return [k for k in self.params if k.startswith("conv")]

    def set_training(self, flag: bool):
        for layer in self.trunk + self.head:
            layer.training = flag

    def reseed_dropout(self, rng: Rng):
        self.drop.rng = rng

    def features(self, X) -> np.ndarray:
        """Flattened output of the third stage, shape ``(N, d)``."""
        h = as_tensor(X)
        for layer in self.trunk:
            h = layer.forward(h)
        return h

    def features_backward(self, grad):
        for layer in reversed(self.trunk):
            grad = layer.backward(grad)
        return grad

    def forward(self, X) -> np.ndarray:
        h = self.features(X)
        for layer in self.head:
            h = layer.forward(h)
        return h

    def backward(self, grad_logits):
        g = grad_logits
        for layer in reversed(self.head):
            g = layer.backward(g)
        return self.features_backward(g)

    def grads(self) -> ParamSet:
        return ParamSet((f"{n}.{k}", layer.grads[k]) for n, layer in self.named for k in layer.params)

    def grads_for(self, names) -> ParamSet:
        layers = dict(self.named)
        out = ParamSet()
        for name in names:
            layer, k = name.split(".")
            out[name] = layers[layer].grads[k]
        return out

    def make_inputs(self, data: Dataset):
        return data.X, data.y


class SequenceInputs:
    """Lazily gathers ``(batch, tau, ...)`` arrays from per-window rows."""

    def __init__(self, rows: np.ndarray, index: np.ndarray):
        self.rows = rows
        self.index = index

    def __len__(self):
        return len(self.index)

    def __getitem__(self, idx):
        return self.rows[self.index[idx]]


class CnnLstm:
    def __init__(self, cnn: CNN, tau: int, q: int, hidden: int = 8, dropout: float = 0.2,
                 freeze_cnn: bool = True, rng: Rng | None = None, init_std: float | str = "he",
                 lstm_init_std: float = 0.1, forget_bias: float = 1.0, head_init_std: float = 0.01):
        if tau < 1 or q < 1:
            raise ValueError(f"need tau >= 1 and q >= 1, got tau={tau}, q={q}")
        rng = rng or Rng(0)
        self.cnn = cnn
        self.tau = tau
        self.q = q
        self.freeze_cnn = freeze_cnn
        self.lstm = LstmCell(cnn.d, q, rng.child(20), lstm_init_std, forget_bias)
        self.fc1 = Dense(q, hidden, rng.child(21), init_std)
        self.drop = Dropout(dropout, rng.child(22))
        self.fc2 = Dense(hidden, 2, rng.child(23), head_init_std)
        self.head = [self.fc1, self.drop, self.fc2]
        self.config = {"arch": "cnn_lstm", "cnn": cnn.config, "tau": tau, "q": q, "hidden": hidden,
                       "dropout": dropout, "freeze_cnn": freeze_cnn}
        own = [(f"lstm.{k}", v) for k, v in self.lstm.params.items()]
        own += [(f"fc1.{k}", v) for k, v in self.fc1.params.items()]
        own += [(f"fc2.{k}", v) for k, v in self.fc2.params.items()]
        self._own = ParamSet(own)
        self._cnn_named = ParamSet((f"cnn.{k}", v) for k, v in cnn.params.items())
        self._cnn_trunk = ParamSet((f"cnn.{k}", cnn.params[k]) for k in cnn.conv_param_names)

    @property
    def params(self) -> ParamSet:
        """Trainable parameters; the CNN trunk is excluded while frozen."""
        if self.freeze_cnn:
            return self._own
        return ParamSet({**self._cnn_trunk, **self._own})

    @property
    def all_params(self) -> ParamSet:
        return ParamSet({**self._cnn_named, **self._own})

    def set_training(self, flag: bool):
        self.cnn.set_training(flag)
        for layer in self.head:
            layer.training = flag

    def reseed_dropout(self, rng: Rng):
        self.drop.rng = rng

    def step_features(self, seqs) -> np.ndarray:
        """Run the shared CNN trunk on every step: ``(N, tau, c, nu) -> (N, tau, d)``."""
        seqs = as_tensor(seqs)
        n, tau = seqs.shape[:2]
        return self.cnn.features(seqs.reshape(n * tau, *seqs.shape[2:])).reshape(n, tau, -1)

    def forward(self, inputs) -> np.ndarray:
        """Logits from raw window sequences ``(N, tau, c, nu)`` or features ``(N, tau, d)``."""
        inputs = as_tensor(inputs)
        self._raw = inputs.ndim == 4
        feats = self.step_features(inputs) if self._raw else inputs
        h = self.lstm.forward(feats)
        for layer in self.head:
            h = layer.forward(h)
        return h

    def backward(self, grad_logits):
        g = grad_logits
        for layer in reversed(self.head):
            g = layer.backward(g)
        dfeats = self.lstm.backward(g)
        if self._raw and not self.freeze_cnn:
            n, tau, d = dfeats.shape
            self.cnn.features_backward(dfeats.reshape(n * tau, d))
        return dfeats

    def grads(self) -> ParamSet:
        out = ParamSet()
        if not self.freeze_cnn:
            cnn_grads = self.cnn.grads_for(self.cnn.conv_param_names)
            for k, v in cnn_grads.items():
                out[f"cnn.{k}"] = v
        for k in self.lstm.params:
            out[f"lstm.{k}"] = self.lstm.grads[k]
        for name, layer in (("fc1", self.fc1), ("fc2", self.fc2)):
            for k in layer.params:
                out[f"{name}.{k}"] = layer.grads[k]
        return out

    def make_inputs(self, seqs: SequenceDataset):
        if self.freeze_cnn:
            rows = extract_features(self.cnn, seqs.data.X)
        else:
            rows = seqs.data.X
        return SequenceInputs(rows, seqs.index), seqs.labels


def extract_features(cnn: CNN, X, batch_size: int = 500) -> np.ndarray:
    """Inference-mode CNN features for every window, in chunks.

    The last result is memoised on the CNN, keyed by the input array object
    and a digest of the current parameters.
    """
    digest = hashlib.sha1(b"".join(v.tobytes() for v in cnn.params.values())).digest()
    cached = getattr(cnn, "_feature_cache", None)
    if cached is not None and cached[0] is X and cached[1] == digest:
        return cached[2]
    cnn.set_training(False)
    out = np.empty((len(X), cnn.d), dtype=DTYPE)
    for s in range(0, len(X), batch_size):
        out[s:s + batch_size] = cnn.features(X[s:s + batch_size])
    cnn._feature_cache = (X, digest, out)
    return out


def build_cnn(c: int, nu: int, rng: Rng | None = None, **kwargs) -> CNN:
    return CNN(c, nu, rng=rng, **kwargs)


def build_cnn_lstm(cnn: CNN, tau: int, q: int, rng: Rng | None = None, **kwargs) -> CnnLstm:
    return CnnLstm(cnn, tau, q, rng=rng, **kwargs)


# --- training and inference ----------------------------------------------------

def train_epoch(model, data, optimizer, rng: Rng, batch_size: int = 100, labels=None) -> float:
    """One pass over shuffled mini-batches; returns the sample-weighted mean loss.

    ``data`` is either a Dataset / SequenceDataset (converted through
    ``model.make_inputs``) or an indexable input array paired with ``labels``.
    """
    if labels is None:
        inputs, labels = model.make_inputs(data)
    else:
        inputs = data
    n = len(labels)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    model.set_training(True)
    model.reseed_dropout(rng.child(1))
    order = rng.permutation(n)
    total = 0.0
    for s in range(0, n, batch_size):
        idx = order[s:s + batch_size]
        logits = model.forward(inputs[idx])
        loss, _, grad = softmax_xent(logits, labels[idx])
        if not np.isfinite(loss):
            raise NumericError(f"non-finite training loss {loss}")
        model.backward(grad)
        optimizer.step(model.params, model.grads())
        total += loss * len(idx)
    return total / n


def fit(model, data, optimizer, epochs: int, rng: Rng, batch_size: int = 100) -> list[float]:
    inputs, labels = model.make_inputs(data)
    return [train_epoch(model, inputs, optimizer, rng.child(e), batch_size, labels=labels)
            for e in range(epochs)]


def mean_loss(model, inputs, labels, batch_size: int = 500) -> float:
    """Inference-mode cross-entropy over a whole input set."""
    p = predict_proba(model, inputs, batch_size)
    eps = np.finfo(DTYPE).tiny
    return float(-np.mean(np.log(np.where(labels == 1, p[:, 1], p[:, 0]) + eps)))


def predict_proba(model, inputs, batch_size: int = 500) -> np.ndarray:
    model.set_training(False)
    out = np.empty((len(inputs), 2), dtype=DTYPE)
    for s in range(0, len(inputs), batch_size):
        out[s:s + batch_size] = softmax(model.forward(inputs[s:s + batch_size]))
    return out


def predict(model, x):
    """Probability of SMM for one window ``(c, nu)`` or one sequence ``(tau, c, nu)``.

    Use ``predict_proba`` for batches.
    """
    x = as_tensor(x)
    return float(predict_proba(model, x[None])[0, 1])


def predict_labels(model, inputs) -> np.ndarray:
    return (predict_proba(model, inputs)[:, 1] >= THRESHOLD).astype(np.int64)


# --- persistence -------------------------------------------------------------------

def _header_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_model(model, path) -> None:
    params = model.all_params if isinstance(model, CnnLstm) else model.params
    save_params(params, path)
    _header_path(path).write_text(json.dumps(model.config, sort_keys=True, indent=1) + "\n")


def model_from_config(config: dict):
    if config["arch"] == "cnn":
        cfg = dict(config)
        cfg.pop("arch")
        return CNN(**cfg)
    if config["arch"] == "cnn_lstm":
        cnn = model_from_config(config["cnn"])
        return CnnLstm(cnn, config["tau"], config["q"], hidden=config["hidden"],
                       dropout=config["dropout"], freeze_cnn=config["freeze_cnn"])
    raise ConfigError(f"unknown architecture {config['arch']!r}")


def load_model(path):
    config = json.loads(_header_path(path).read_text())
    model = model_from_config(config)
    assign_params(model, load_params(path))
    return model


def assign_params(model, loaded, names=None) -> None:
    """Copy loaded tensors into the model in place (keeps optimizer aliasing)."""
    target = model.all_params if isinstance(model, CnnLstm) else model.params
    names = list(target) if names is None else list(names)
    check_compatible(loaded, target.shapes(), names)
    for k in names:
        np.copyto(target[k], loaded[k])
