"""Desk-scale variational autoencoder trained with explicit backprop + Adam.

The encoder produces a latent mean and log-variance; the decoder maps a
latent vector back to pixel space with an identity output head (the decoder
models the mean of a unit-variance Gaussian likelihood). All activations are
exactly piecewise linear, so the deterministic reconstruction path
``decode(encode_mean(x))`` lowers onto the detection graph without
approximation.

Layer forward/backward passes are pure (caches travel explicitly), so a
trained model can be shared read-only across trial workers.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass

import numpy as np

from . import operators


class TrainingDivergedError(Exception):
    """Training loss exceeded the divergence bound."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class WeightFormatError(Exception):
    """The weight file does not parse as a pwl-vae-v1 document."""


LOGVAR_CLIP = 10.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0 or self.eps <= 0:
            raise ValueError("learning_rate must be >= 0 and eps > 0")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")


# ---------------------------------------------------------------------------
# Layers. forward returns (output, cache); backward takes (grad, cache) and
# returns (input grad, [per-parameter grads aligned with params()]).
# ---------------------------------------------------------------------------


class Dense:
    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator) -> "Dense":
        scale = math.sqrt(2.0 / n_in)
        return cls(rng.standard_normal((n_out, n_in)) * scale, np.zeros(n_out))

    @property
    def out_dim(self):
        return self.weight.shape[0]

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        return x @ self.weight.T + self.bias, x

    def backward(self, g, cache):
        return g @ self.weight, [g.T @ cache, g.sum(axis=0)]

    def graph_spec(self):
        return {"kind": "affine", "weight": self.weight, "bias": self.bias}


class Relu:
    out_dim = None

    def params(self):
        return []

    def forward(self, x):
        return np.maximum(x, 0.0), x > 0.0

    def backward(self, g, cache):
        return g * cache, []

    def graph_spec(self):
        return {"kind": "relu"}


class Conv2d:
    """3x3-style convolution evaluated through its dense matrix form.

    The dense matrix is rebuilt from the kernel on every forward pass (a
    cheap scatter at desk scale); gradients flow back onto kernel taps via
    the precomputed (out, in, tap) index map.
    """

    def __init__(self, kernel, bias, h, w, stride=1, padding=1):
        self.kernel = np.asarray(kernel, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.h, self.w, self.stride, self.padding = h, w, stride, padding
        c_out, c_in, k, _ = self.kernel.shape
        self._o_idx, self._i_idx, self._k_idx, self.oh, self.ow = operators.conv2d_index_map(
            c_out, c_in, k, h, w, stride, padding
        )
        self._in_dim = c_in * h * w
        self._out_dim = c_out * self.oh * self.ow

    @classmethod
    def init(cls, c_in, c_out, k, h, w, rng, stride=1, padding=1):
        scale = math.sqrt(2.0 / (c_in * k * k))
        return cls(rng.standard_normal((c_out, c_in, k, k)) * scale, np.zeros(c_out),
                   h, w, stride, padding)

    @property
    def out_dim(self):
        return self._out_dim

    def params(self):
        return [self.kernel, self.bias]

    def _matrix(self):
        mat = np.zeros((self._out_dim, self._in_dim))
        mat[self._o_idx, self._i_idx] = self.kernel.reshape(-1)[self._k_idx]
        return mat

    def _bias_vector(self):
        return np.repeat(self.bias, self.oh * self.ow)

    def forward(self, x):
        mat = self._matrix()
        return x @ mat.T + self._bias_vector(), (x, mat)

    def backward(self, g, cache):
        x, mat = cache
        dmat = g.T @ x
        dkernel = np.bincount(
            self._k_idx, weights=dmat[self._o_idx, self._i_idx], minlength=self.kernel.size
        ).reshape(self.kernel.shape)
        dbias = g.sum(axis=0).reshape(self.kernel.shape[0], -1).sum(axis=1)
        return g @ mat, [dkernel, dbias]

    def graph_spec(self):
        # Kernel-only matrix plus the replicated per-channel bias.
        return {
            "kind": "conv2d", "kernel": self.kernel, "h": self.h, "w": self.w,
            "stride": self.stride, "padding": self.padding, "bias": self._bias_vector(),
        }


class MaxPool2d:
    def __init__(self, h, w, window, channels):
        self.h, self.w, self.window, self.channels = h, w, window, channels
        self.table = operators.pool_windows(h, w, window, channels)
        self._in_dim = channels * h * w

    @property
    def out_dim(self):
        return self.table.shape[0]

    def params(self):
        return []

    def forward(self, x):
        v = x[:, self.table]
        arg = v.argmax(axis=2)
        winners = np.take_along_axis(self.table[None, :, :], arg[:, :, None], axis=2)[:, :, 0]
        return np.take_along_axis(v, arg[:, :, None], axis=2)[:, :, 0], winners

    def backward(self, g, cache):
        dx = np.zeros((g.shape[0], self._in_dim))
        rows = np.arange(g.shape[0])[:, None]
        np.add.at(dx, (rows, cache), g)
        return dx, []

    def graph_spec(self):
        return {"kind": "maxpool", "h": self.h, "w": self.w, "window": self.window,
                "channels": self.channels}


class Upsample2d:
    """Nearest-neighbour upsampling; a fixed 0/1 linear map with no params."""

    def __init__(self, h, w, factor, channels):
        self.h, self.w, self.factor, self.channels = h, w, factor, channels
        self.matrix = operators.upsample_matrix(h, w, factor, channels)

    @property
    def out_dim(self):
        return self.matrix.shape[0]

    def params(self):
        return []

    def forward(self, x):
        return x @ self.matrix.T, None

    def backward(self, g, cache):
        return g @ self.matrix, []

    def graph_spec(self):
        return {"kind": "upsample", "h": self.h, "w": self.w, "factor": self.factor,
                "channels": self.channels}


def _run_layers(layers, x):
    caches = []
    for layer in layers:
        x, cache = layer.forward(x)
        caches.append(cache)
    return x, caches


def _back_layers(layers, caches, g, grad_sink):
    for layer, cache in zip(reversed(layers), reversed(caches)):
        g, param_grads = layer.backward(g, cache)
        grad_sink[id(layer)] = param_grads
    return g


# ---------------------------------------------------------------------------
# Model.
# ---------------------------------------------------------------------------


class VaeModel:
    """Encoder trunk + (mu, logvar) heads + decoder, all piecewise linear."""

    def __init__(self, n, m, image_shape, enc, mu_head, logvar_head, dec, arch="mlp"):
        self.n = int(n)
        self.m = int(m)
        self.image_shape = (int(image_shape[0]), int(image_shape[1]))
        self.enc = list(enc)
        self.mu_head = mu_head
        self.logvar_head = logvar_head
        self.dec = list(dec)
        self.arch = arch
        self.loss_trace: list[float] = []

    @classmethod
    def init(cls, n: int, m: int = 10, seed: int = 0, conv: bool = False,
             conv_channels: int = 4) -> "VaeModel":
        """Reference architectures: an MLP n-64-32-(m,m) / m-32-64-n, or a
        small conv variant exercising conv, maxpool, and upsample nodes."""
        from .linalg import infer_shape

        rng = np.random.default_rng(seed)
        h, w = infer_shape(n)
        if not conv:
            enc = [Dense.init(n, 64, rng), Relu(), Dense.init(64, 32, rng), Relu()]
            trunk_out = 32
            dec = [Dense.init(m, 32, rng), Relu(), Dense.init(32, 64, rng), Relu(),
                   Dense.init(64, n, rng)]
        else:
            if h * w != n or h % 2 or w % 2:
                raise ValueError("conv variant needs an even-sided square image")
            c = conv_channels
            enc = [
                Conv2d.init(1, c, 3, h, w, rng),
                Relu(),
                MaxPool2d(h, w, 2, c),
                Relu(),
            ]
            trunk_out = c * (h // 2) * (w // 2)
            dec = [
                Dense.init(m, trunk_out, rng),
                Relu(),
                Upsample2d(h // 2, w // 2, 2, c),
                Conv2d.init(c, 1, 3, h, w, rng),
            ]
        mu_head = Dense.init(trunk_out, m, rng)
        logvar_head = Dense.init(trunk_out, m, rng)
        return cls(n, m, (h, w), enc, mu_head, logvar_head, dec,
                   arch="conv" if conv else "mlp")

    def parameters(self) -> list[np.ndarray]:
        arrays = []
        for layer in [*self.enc, self.mu_head, self.logvar_head, *self.dec]:
            arrays.extend(layer.params())
        return arrays

    def encode(self, x):
        """(mu, logvar) for a batch; logvar clipped for numerical stability."""
        h, _ = _run_layers(self.enc, np.atleast_2d(x))
        mu, _ = self.mu_head.forward(h)
        logvar, _ = self.logvar_head.forward(h)
        return mu, np.clip(logvar, -LOGVAR_CLIP, LOGVAR_CLIP)

    def decode(self, z):
        out, _ = _run_layers(self.dec, np.atleast_2d(z))
        return out

    def recon_path_spec(self) -> list[dict]:
        """Layer specs of the deterministic path, for detector assembly."""
        layers = [*self.enc, self.mu_head, *self.dec]
        specs = []
        for layer in layers:
            spec = layer.graph_spec()
            if spec["kind"] == "relu":
                spec["dim"] = None  # filled below from running dimension
            specs.append(spec)
        dim = self.n
        for spec, layer in zip(specs, layers):
            if spec["kind"] == "relu":
                spec["dim"] = dim
            else:
                dim = layer.out_dim
        return specs


def reconstruct(model: VaeModel, x) -> np.ndarray:
    """Deterministic reconstruction decode(encode_mean(x)); no sampling."""
    from .linalg import pixels_of

    vec = pixels_of(x)
    if vec.shape[0] != model.n:
        raise ValueError(f"image has dimension {vec.shape[0]}, model expects {model.n}")
    h, _ = _run_layers(model.enc, vec[None, :])
    mu, _ = model.mu_head.forward(h)
    return model.decode(mu)[0]


def elbo_loss(model: VaeModel, batch: np.ndarray, noise: np.ndarray):
    """Negative ELBO (up to constants) and gradients for every parameter.

    loss = mean_i [ 0.5*||x_i - decode(z_i)||^2 + KL(mu_i, sigma_i^2) ],
    z_i = mu_i + sigma_i * noise_i, KL = 0.5*sum(mu^2 + sigma^2 - logvar - 1).
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    bsz = batch.shape[0]
    if batch.shape[1] != model.n or noise.shape != (bsz, model.m):
        raise ValueError("batch/noise shapes do not match the model")

    h, enc_caches = _run_layers(model.enc, batch)
    mu, mu_cache = model.mu_head.forward(h)
    logvar_raw, lv_cache = model.logvar_head.forward(h)
    clip_mask = np.abs(logvar_raw) < LOGVAR_CLIP
    logvar = np.clip(logvar_raw, -LOGVAR_CLIP, LOGVAR_CLIP)
    sigma = np.exp(0.5 * logvar)
    zlat = mu + sigma * noise
    xrec, dec_caches = _run_layers(model.dec, zlat)

    recon = 0.5 * np.sum((xrec - batch) ** 2, axis=1)
    kl = 0.5 * np.sum(mu**2 + np.exp(logvar) - logvar - 1.0, axis=1)
    loss = float(np.mean(recon + kl))
    if not np.isfinite(loss):
        raise TrainingDivergedError("non-finite loss in elbo_loss")

    grad_sink: dict[int, list] = {}
    g_rec = (xrec - batch) / bsz
    g_z = _back_layers(model.dec, dec_caches, g_rec, grad_sink)
    g_mu = g_z + mu / bsz
    g_logvar = g_z * noise * sigma * 0.5 + 0.5 * (np.exp(logvar) - 1.0) / bsz
    g_logvar = g_logvar * clip_mask
    g_h_mu, mu_grads = model.mu_head.backward(g_mu, mu_cache)
    g_h_lv, lv_grads = model.logvar_head.backward(g_logvar, lv_cache)
    grad_sink[id(model.mu_head)] = mu_grads
    grad_sink[id(model.logvar_head)] = lv_grads
    _back_layers(model.enc, enc_caches, g_h_mu + g_h_lv, grad_sink)

    grads = []
    for layer in [*model.enc, model.mu_head, model.logvar_head, *model.dec]:
        grads.extend(grad_sink[id(layer)])
    return loss, grads


class Adam:
    """Standard Adam with bias correction, matching the usual defaults."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads):
        self.t += 1
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / (1.0 - self.beta1**self.t)
            v_hat = self.v[i] / (1.0 - self.beta2**self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def train(model: VaeModel, data: np.ndarray, cfg: TrainConfig) -> VaeModel:
    """Train a copy of the model on normal images; the input is untouched.

    The per-epoch mean loss trace is stored on the returned model as
    ``loss_trace``. Loss above 1e6 aborts with the trace attached.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] < 1 or data.shape[1] != model.n:
        raise ValueError("training data must be a nonempty (N, n) array")
    trained = copy.deepcopy(model)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(trained.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(data.shape[0])
        epoch_losses = []
        for start in range(0, data.shape[0], cfg.batch_size):
            batch = data[order[start : start + cfg.batch_size]]
            noise = rng.standard_normal((batch.shape[0], trained.m))
            try:
                loss, grads = elbo_loss(trained, batch, noise)
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(
                    f"training diverged in epoch {epoch}, batch {start // cfg.batch_size}",
                    trace,
                ) from exc
            if loss > 1e6:
                raise TrainingDivergedError(
                    f"loss {loss:.3e} exceeded 1e6 in epoch {epoch}", trace
                )
            opt.step(grads)
            epoch_losses.append(loss)
        trace.append(float(np.mean(epoch_losses)))
    trained.loss_trace = trace
    return trained


# ---------------------------------------------------------------------------
# Weight persistence: pwl-vae-v1 JSON with 17-significant-digit numbers.
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    if not np.isfinite(x):
        raise ValueError("weights must be finite")
    return format(float(x), ".17g")


def _layer_docs(model: VaeModel) -> list[dict]:
    docs = []

    def dense_doc(prefix, layer):
        return {"kind": f"{prefix}_dense", "shape": [int(s) for s in layer.weight.shape],
                "weights": layer.weight.ravel(), "bias": layer.bias}

    def one(prefix, layer):
        if isinstance(layer, Dense):
            return dense_doc(prefix, layer)
        if isinstance(layer, Relu):
            return {"kind": f"{prefix}_relu", "shape": [], "weights": np.zeros(0), "bias": np.zeros(0)}
        if isinstance(layer, Conv2d):
            shape = [*map(int, layer.kernel.shape), layer.stride, layer.padding, layer.h, layer.w]
            return {"kind": f"{prefix}_conv2d", "shape": shape,
                    "weights": layer.kernel.ravel(), "bias": layer.bias}
        if isinstance(layer, MaxPool2d):
            return {"kind": f"{prefix}_maxpool", "shape": [layer.window, layer.channels, layer.h, layer.w],
                    "weights": np.zeros(0), "bias": np.zeros(0)}
        if isinstance(layer, Upsample2d):
            return {"kind": f"{prefix}_upsample", "shape": [layer.factor, layer.channels, layer.h, layer.w],
                    "weights": np.zeros(0), "bias": np.zeros(0)}
        raise WeightFormatError(f"cannot serialize layer {type(layer).__name__}")

    docs.extend(one("enc", layer) for layer in model.enc)
    docs.append(dense_doc("mu", model.mu_head))
    docs.append(dense_doc("logvar", model.logvar_head))
    docs.extend(one("dec", layer) for layer in model.dec)
    return docs


def save_weights(model: VaeModel, path) -> None:
    """Write the pwl-vae-v1 JSON document; exact f64 round-trip guaranteed."""
    parts = ['{\n"format": "pwl-vae-v1",\n']
    parts.append(f'"n": {model.n},\n"m": {model.m},\n"layers": [\n')
    layer_docs = _layer_docs(model)
    for i, doc in enumerate(layer_docs):
        weights = ", ".join(_fmt(v) for v in doc["weights"])
        bias = ", ".join(_fmt(v) for v in doc["bias"])
        shape = ", ".join(str(s) for s in doc["shape"])
        sep = "," if i + 1 < len(layer_docs) else ""
        parts.append(
            f'{{"kind": {json.dumps(doc["kind"])}, "shape": [{shape}], '
            f'"weights": [{weights}], "bias": [{bias}]}}{sep}\n'
        )
    parts.append("]\n}\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(parts))


def _require(cond, msg):
    if not cond:
        raise WeightFormatError(msg)


def load_weights(path) -> VaeModel:
    """Rebuild a model from a pwl-vae-v1 document, validating every layer."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise WeightFormatError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}") from exc
    _require(isinstance(doc, dict), f"{path}: top level must be an object")
    _require(doc.get("format") == "pwl-vae-v1", f"{path}: unknown format {doc.get('format')!r}")
    for key in ("n", "m", "layers"):
        _require(key in doc, f"{path}: missing key {key!r}")
    n, m = int(doc["n"]), int(doc["m"])

    groups = {"enc": [], "dec": []}
    heads = {}
    for pos, entry in enumerate(doc["layers"]):
        where = f"{path}: layers[{pos}]"
        _require(isinstance(entry, dict), f"{where} must be an object")
        for key in ("kind", "shape", "weights", "bias"):
            _require(key in entry, f"{where} missing key {key!r}")
        kind = entry["kind"]
        prefix, _, op = kind.partition("_")
        shape = [int(s) for s in entry["shape"]]
        weights = np.asarray(entry["weights"], dtype=np.float64)
        bias = np.asarray(entry["bias"], dtype=np.float64)
        if op == "dense":
            _require(len(shape) == 2 and weights.size == shape[0] * shape[1],
                     f"{where}: dense weights do not match shape {shape}")
            _require(bias.size == shape[0], f"{where}: dense bias does not match shape")
            layer = Dense(weights.reshape(shape), bias)
        elif op == "relu":
            layer = Relu()
        elif op == "conv2d":
            _require(len(shape) == 8, f"{where}: conv2d shape needs 8 entries")
            co, ci, k, k2, stride, pad, h, w = shape
            _require(weights.size == co * ci * k * k2, f"{where}: conv2d weights do not match shape")
            layer = Conv2d(weights.reshape(co, ci, k, k2), bias, h, w, stride, pad)
        elif op == "maxpool":
            _require(len(shape) == 4, f"{where}: maxpool shape needs 4 entries")
            layer = MaxPool2d(shape[2], shape[3], shape[0], shape[1])
        elif op == "upsample":
            _require(len(shape) == 4, f"{where}: upsample shape needs 4 entries")
            layer = Upsample2d(shape[2], shape[3], shape[0], shape[1])
        else:
            raise WeightFormatError(f"{where}: unknown layer kind {kind!r}")
        if prefix in ("mu", "logvar"):
            _require(op == "dense", f"{where}: {prefix} head must be dense")
            heads[prefix] = layer
        elif prefix in groups:
            groups[prefix].append(layer)
        else:
            raise WeightFormatError(f"{where}: unknown layer prefix {prefix!r}")

    _require("mu" in heads and "logvar" in heads, f"{path}: missing mu/logvar heads")
    from .linalg import infer_shape

    arch = "conv" if any(isinstance(l, Conv2d) for l in groups["enc"]) else "mlp"
    return VaeModel(n, m, infer_shape(n), groups["enc"], heads["mu"], heads["logvar"],
                    groups["dec"], arch=arch)
