"""Dense networks with hand-written reverse-mode gradients.

Computation is float64 unless a net is built with ``dtype=np.float32``, which
roughly halves the cost of training at desk scale. A ``DenseNet`` caches the activations of its
most recent forward pass so that ``backward`` can return gradients with respect
to both the parameters and the network input. Inputs are batched: arrays of
shape ``(batch, width)``; a 1-D input is treated as a batch of one.
"""

import json
import math
from pathlib import Path

import numpy as np

from .errors import CheckpointError, NonFiniteGradientError, ShapeError

CHECKPOINT_FORMAT = "srpo-ckpt/1"
ACTIVATIONS = ("relu", "tanh", "none")
LAYERNORM_EPS = 1e-5


class _Linear:
    def __init__(self, name, n_in, n_out):
        self.name = name
        self.n_in = n_in
        self.n_out = n_out
        self.w = f"{name}.weight"
        self.b = f"{name}.bias"

    def init(self, params, rng):
        bound = 1.0 / math.sqrt(self.n_in)
        params[self.w] = rng.uniform(-bound, bound, size=(self.n_in, self.n_out))
        params[self.b] = rng.uniform(-bound, bound, size=self.n_out)

    def forward(self, params, x, train, rng):
        if x.shape[1] != self.n_in:
            raise ShapeError(self.name, self.n_in, x.shape[1])
        self.x = x
        return x @ params[self.w] + params[self.b]

    def backward(self, params, g, grads):
        if grads is not None:
            grads[self.w] = self.x.T @ g
            grads[self.b] = g.sum(axis=0)
        return g @ params[self.w].T


class _Activation:
    def __init__(self, kind):
        self.kind = kind

    def init(self, params, rng):
        pass

    def forward(self, params, x, train, rng):
        if self.kind == "relu":
            self.mask = x > 0
            return x * self.mask
        if self.kind == "tanh":
            self.y = np.tanh(x)
            return self.y
        return x

    def backward(self, params, g, grads):
        if self.kind == "relu":
            return g * self.mask
        if self.kind == "tanh":
            return g * (1.0 - self.y**2)
        return g


class _LayerNorm:
    # no learned affine
    def init(self, params, rng):
        pass

    def forward(self, params, x, train, rng):
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        self.inv = 1.0 / np.sqrt((xc**2).mean(axis=1, keepdims=True) + LAYERNORM_EPS)
        self.xhat = xc * self.inv
        return self.xhat

    def backward(self, params, g, grads):
        gm = g.mean(axis=1, keepdims=True)
        gx = (g * self.xhat).mean(axis=1, keepdims=True)
        return self.inv * (g - gm - self.xhat * gx)


class _Dropout:
    def __init__(self, rate):
        self.rate = rate

    def init(self, params, rng):
        pass

    def forward(self, params, x, train, rng):
        if not train or self.rate == 0.0:
            self.mask = None
            return x
        keep = 1.0 - self.rate
        self.mask = ((rng.random(x.shape) < keep) / keep).astype(x.dtype)
        return x * self.mask

    def backward(self, params, g, grads):
        return g if self.mask is None else g * self.mask


class _Residual:
    def __init__(self, ops):
        self.ops = ops

    def init(self, params, rng):
        for op in self.ops:
            op.init(params, rng)

    def forward(self, params, x, train, rng):
        h = x
        for op in self.ops:
            h = op.forward(params, h, train, rng)
        return x + h

    def backward(self, params, g, grads):
        h = g
        for op in reversed(self.ops):
            h = op.backward(params, h, grads)
        return g + h


class DenseNet:
    """Multilayer perceptron, plain or with residual blocks.

    Plain nets chain ``Linear -> activation`` for every consecutive pair in
    ``layer_dims``. With ``residual_blocks > 0`` the dims must be
    ``[in, width, out]`` and the net is::

        Linear(in, width) -> k x [x + Linear(ReLU(Linear(LN(Dropout(x)))))]
        -> ReLU -> Linear(width, out)
    """

    def __init__(self, layer_dims, activations=None, residual_blocks=0,
                 dropout=0.0, seed=0, dtype=np.float64):
        layer_dims = [int(d) for d in layer_dims]
        if len(layer_dims) < 2 or any(d <= 0 for d in layer_dims):
            raise ValueError(f"layer_dims must hold >= 2 positive ints, got {layer_dims}")
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {dropout}")
        n_layers = len(layer_dims) - 1
        if activations is None:
            activations = ["relu"] * (n_layers - 1) + ["none"]
        activations = list(activations)
        if residual_blocks:
            if n_layers != 2:
                raise ValueError("residual nets take layer_dims [in, width, out]")
            activations = ["relu", "none"]
        if len(activations) != n_layers or any(a not in ACTIVATIONS for a in activations):
            raise ValueError(f"need {n_layers} activations from {ACTIVATIONS}, got {activations}")

        self.layer_dims = layer_dims
        self.activations = activations
        self.residual_blocks = int(residual_blocks)
        self.dropout = float(dropout)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.float32, np.float64):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")
        self.rng = np.random.default_rng(self.seed)
        self.ops = self._build()
        self.params = {}
        for op in self.ops:
            op.init(self.params, self.rng)
        # drawn in float64 first so both precisions start from the same weights
        self.params = {k: v.astype(self.dtype) for k, v in self.params.items()}
        self._cached = False

    def _build(self):
        dims, acts = self.layer_dims, self.activations
        if not self.residual_blocks:
            ops = []
            for i in range(len(dims) - 1):
                ops.append(_Linear(f"layer{i}", dims[i], dims[i + 1]))
                ops.append(_Activation(acts[i]))
            return ops
        d_in, width, d_out = dims
        ops = [_Linear("input", d_in, width)]
        for k in range(self.residual_blocks):
            ops.append(_Residual([
                _Dropout(self.dropout),
                _LayerNorm(),
                _Linear(f"block{k}.fc1", width, width),
                _Activation("relu"),
                _Linear(f"block{k}.fc2", width, width),
            ]))
        ops += [_Activation("relu"), _Linear("output", width, d_out)]
        return ops

    @property
    def in_dim(self):
        return self.layer_dims[0]

    @property
    def out_dim(self):
        return self.layer_dims[-1]

    def n_params(self):
        return sum(p.size for p in self.params.values())

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 1:
            x = x[None, :]
        h = x
        for op in self.ops:
            h = op.forward(self.params, h, train, self.rng)
        self._cached = True
        self._batch = h.shape[0]
        return h

    __call__ = forward

    def backward(self, upstream, need_params=True):
        """Pull ``upstream`` (d loss / d output) back through the cached pass.

        Returns ``(param_grads, input_grad)``; ``param_grads`` is None when
        ``need_params`` is false. The cache survives, so several upstream
        vectors can be pushed through one forward pass.
        """
        if not self._cached:
            raise RuntimeError("backward() called without a cached forward pass")
        g = np.asarray(upstream, dtype=self.dtype)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != (self._batch, self.out_dim):
            raise ValueError(f"upstream shape {g.shape} != output shape {(self._batch, self.out_dim)}")
        grads = {} if need_params else None
        for op in reversed(self.ops):
            g = op.backward(self.params, g, grads)
        return grads, g

    def backward_params(self, upstream):
        return self.backward(upstream)[0]

    def backward_input(self, upstream):
        return self.backward(upstream, need_params=False)[1]

    def copy(self):
        other = DenseNet(self.layer_dims, self.activations, self.residual_blocks,
                         self.dropout, self.seed, self.dtype)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def config(self):
        return {
            "kind": "DenseNet",
            "layer_dims": self.layer_dims,
            "activations": self.activations,
            "residual_blocks": self.residual_blocks,
            "dropout": self.dropout,
            "seed": self.seed,
            "dtype": self.dtype.name,
        }

    def arrays(self):
        return dict(self.params)

    @classmethod
    def from_state(cls, config, arrays):
        net = cls(config["layer_dims"], config["activations"], config["residual_blocks"],
                  config["dropout"], config["seed"], config.get("dtype", "float64"))
        for key, ref in net.params.items():
            if key not in arrays:
                raise CheckpointError(f"missing parameter {key!r}")
            if arrays[key].shape != ref.shape:
                raise CheckpointError(f"{key}: shape {arrays[key].shape} != {ref.shape}")
            net.params[key] = np.array(arrays[key], dtype=net.dtype)
        return net


class FourierTimeEmbedding:
    """Gaussian Fourier projection of a scalar time: ``[sin(2πWt), cos(2πWt)]``."""

    def __init__(self, num_frequencies=16, frequency_scale=30.0, seed=0):
        if num_frequencies <= 0 or frequency_scale <= 0:
            raise ValueError("num_frequencies and frequency_scale must be positive")
        self.num_frequencies = int(num_frequencies)
        self.frequency_scale = float(frequency_scale)
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self.frequencies = rng.normal(0.0, self.frequency_scale, size=self.num_frequencies)

    @property
    def dim(self):
        return 2 * self.num_frequencies

    def __call__(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        proj = 2.0 * np.pi * t[:, None] * self.frequencies[None, :]
        return np.concatenate([np.sin(proj), np.cos(proj)], axis=1)

    def config(self):
        return {"kind": "FourierTimeEmbedding", "num_frequencies": self.num_frequencies,
                "frequency_scale": self.frequency_scale, "seed": self.seed}

    def arrays(self):
        return {"frequencies": self.frequencies}

    @classmethod
    def from_state(cls, config, arrays):
        emb = cls(config["num_frequencies"], config["frequency_scale"], config["seed"])
        emb.frequencies = np.array(arrays["frequencies"], dtype=np.float64)
        return emb


class Adam:
    """Adam with bias correction; ``weight_decay > 0`` gives decoupled AdamW."""

    def __init__(self, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr = float(lr)
        self.betas = tuple(float(b) for b in betas)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if g.shape != params[name].shape:
                raise ValueError(f"{name}: grad shape {g.shape} != param shape {params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(name)
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p = params[name]
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params

    def config(self):
        return {"kind": "Adam", "lr": self.lr, "betas": list(self.betas), "eps": self.eps,
                "weight_decay": self.weight_decay, "step_count": self.step_count,
                "names": sorted(self.m)}

    def arrays(self):
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    @classmethod
    def from_state(cls, config, arrays):
        opt = cls(config["lr"], config["betas"], config["eps"], config["weight_decay"])
        opt.step_count = int(config["step_count"])
        for name in config["names"]:
            opt.m[name] = np.array(arrays[f"m.{name}"])
            opt.v[name] = np.array(arrays[f"v.{name}"])
        return opt


_KINDS = {cls.__name__: cls for cls in (DenseNet, FourierTimeEmbedding, Adam)}


def save_checkpoint(path, components, meta=None):
    """Write named components (nets, embeddings, optimizers, raw arrays) to one npz."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": CHECKPOINT_FORMAT, "meta": meta or {}, "components": {}}
    blobs = {}
    for name, comp in components.items():
        if "/" in name:
            raise ValueError(f"component name may not contain '/': {name!r}")
        if isinstance(comp, np.ndarray):
            header["components"][name] = {"kind": "array"}
            blobs[f"{name}/value"] = comp
            continue
        header["components"][name] = comp.config()
        for key, arr in comp.arrays().items():
            blobs[f"{name}/{key}"] = arr
    blobs["__header__"] = np.array(json.dumps(header))
    with open(path, "wb") as fh:
        np.savez(fh, **blobs)
    return path


def load_checkpoint(path):
    """Inverse of ``save_checkpoint``; returns ``(components, meta)``."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: unsupported format {header.get('format')!r}")
        comps = {}
        for name, cfg in header["components"].items():
            prefix = f"{name}/"
            arrays = {k[len(prefix):]: data[k] for k in data.files if k.startswith(prefix)}
            if cfg["kind"] == "array":
                comps[name] = np.array(arrays["value"])
            else:
                comps[name] = _KINDS[cfg["kind"]].from_state(cfg, arrays)
    return comps, header["meta"]
