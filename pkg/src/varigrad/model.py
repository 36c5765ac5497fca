"""Multi-layer perceptron, softmax likelihood and the minibatch ELBO estimate."""

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError, FormatError, ShapeError
from .kl import DropoutPosterior, Granularity, KlMode, neg_kl_total
from .layers import DenseVariationalLayer, EstimatorMode, NoiseType, matched_alpha

CHECKPOINT_FORMAT = "varigrad.checkpoint"
CHECKPOINT_VERSION = 1


class Activation(enum.Enum):
    RELU = "relu"
    SOFTPLUS = "softplus"


def _activate(kind, x):
    if kind is Activation.RELU:
        return np.maximum(x, 0.0)
    return np.logaddexp(0.0, x)


def _activate_grad(kind, x, upstream):
    if kind is Activation.RELU:
        return upstream * (x > 0.0)
    return upstream / (1.0 + np.exp(-x))


class Mlp:
    """Stack of dense variational layers with a shared hidden nonlinearity.

    The last layer emits logits. Noise on layer 0 acts on the network
    input; noise on later layers acts on hidden units.
    """

    def __init__(self, layers, activation=Activation.RELU):
        if not layers:
            raise ShapeError("an Mlp needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].n_in != layers[i - 1].n_out:
                raise ShapeError(f"layer {i} expects {layers[i].n_in} inputs but layer {i - 1} "
                                 f"emits {layers[i - 1].n_out}")
        self.layers = list(layers)
        self.activation = Activation(activation)

    @classmethod
    def build(cls, dims, rng, input_noise=NoiseType.TYPE_B, hidden_noise=None,
              granularity=Granularity.PER_LAYER, activation=Activation.RELU,
              input_p=0.2, hidden_p=0.5):
        """Initialise a network with widths ``dims = [D, h1, ..., C]``.

        Initial noise levels follow the usual dropout rates: ``input_p`` for
        the first layer and ``hidden_p`` elsewhere, mapped to alpha = p/(1-p)
        for the Gaussian noise types.
        """
        if len(dims) < 2:
            raise ShapeError("dims needs at least input and output widths")
        input_noise = NoiseType(input_noise)
        hidden_noise = input_noise if hidden_noise is None else NoiseType(hidden_noise)
        layers = []
        for i, (k, l) in enumerate(zip(dims[:-1], dims[1:])):
            noise = input_noise if i == 0 else hidden_noise
            p = input_p if i == 0 else hidden_p
            gran = granularity
            if noise not in (NoiseType.TYPE_B, NoiseType.TYPE_A):
                gran = Granularity.PER_LAYER
            elif noise is NoiseType.TYPE_A and gran is Granularity.PER_WEIGHT:
                gran = Granularity.PER_INPUT_NEURON
            alpha0 = max(matched_alpha(p), 1e-12)
            layers.append(DenseVariationalLayer.init(k, l, noise, alpha0, rng, gran, dropout_p=p))
        return cls(layers, activation)

    @property
    def dims(self):
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    def parameters(self):
        """Trainable arrays keyed ``layer{i}.{theta,log_alpha,bias}`` (live views)."""
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.parameters().items():
                out[f"layer{i}.{name}"] = arr
        return out

    def set_parameters(self, params):
        live = self.parameters()
        for key, value in params.items():
            if key not in live:
                raise KeyError(key)
            live[key][...] = value

    def copy(self):
        layers = []
        for layer in self.layers:
            post = layer.posterior
            layers.append(DenseVariationalLayer(
                DropoutPosterior(post.theta.copy(), post.log_alpha.copy(), post.granularity,
                                 post.correlated),
                layer.bias.copy(), layer.noise, layer.dropout_p))
        return Mlp(layers, self.activation)

    def forward(self, X, mode, rng=None):
        """Returns logits and the per-layer caches needed by :meth:`backward`."""
        mode = EstimatorMode(mode)
        if rng is None and mode is not EstimatorMode.NONE:
            raise ConfigurationError("stochastic forward passes need an RngStream")
        h = np.asarray(X, dtype=np.float64)
        caches, pre = [], []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            b, cache = layer.forward(h, mode, rng)
            caches.append(cache)
            pre.append(b)
            h = b if i == last else _activate(self.activation, b)
        return h, (caches, pre)

    def backward(self, state, d_logits):
        caches, pre = state
        grads = {}
        upstream = d_logits
        for i in range(len(self.layers) - 1, -1, -1):
            if i != len(self.layers) - 1:
                upstream = _activate_grad(self.activation, pre[i], upstream)
            g = self.layers[i].backward(caches[i], upstream)
            upstream = g.pop("A")
            for name, value in g.items():
                grads[f"layer{i}.{name}"] = value
        return grads

    def mean_alpha(self):
        """Mean alpha of every layer with Gaussian multiplicative noise."""
        return [float(np.mean(np.exp(layer.posterior.log_alpha)))
                for layer in self.layers
                if layer.noise in (NoiseType.TYPE_A, NoiseType.TYPE_B, NoiseType.GAUSSIAN_FIXED)]


def softmax_cross_entropy(logits, labels):
    """Total log-likelihood ``sum_m log softmax(logits_m)[y_m]`` and its gradient.

    The gradient is of the returned log-likelihood, ``onehot - softmax``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    M, C = logits.shape
    if labels.shape != (M,):
        raise ShapeError(f"expected {M} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise DomainError(f"labels must lie in [0, {C})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(M)
    ll = float(np.sum(shifted[rows, labels] - log_z))
    grad = -np.exp(shifted - log_z[:, None])
    grad[rows, labels] += 1.0
    return ll, grad


@dataclass
class ElboReport:
    expected_ll_estimate: float
    neg_kl: float
    elbo: float
    per_layer_kl: list = field(default_factory=list)
    minibatch_ll: float = 0.0


def elbo_minibatch(model, X, y, N, mode, rng=None, kl_mode=KlMode.POLYNOMIAL, kl_scale=1.0,
                   compute_grads=True):
    """Minibatch estimate of the variational lower bound and its gradient.

    ``expected_ll_estimate = (N / M) * sum_m log p(y_m | x_m, w)`` for one
    noise realisation, plus the scaled negative KL of every adaptive layer.
    Gradients are of the ELBO itself (for ascent).
    """
    X = np.asarray(X, dtype=np.float64)
    M = X.shape[0]
    if M < 1:
        raise ShapeError("minibatch is empty")
    if N < M:
        raise DomainError(f"dataset size N={N} is smaller than the minibatch M={M}")
    kl_mode = KlMode(kl_mode)

    logits, state = model.forward(X, mode, rng)
    ll, d_logits = softmax_cross_entropy(logits, y)
    scale = N / M
    expected_ll = scale * ll

    per_layer = []
    kl_grads = {}
    for i, layer in enumerate(model.layers):
        if not layer.adaptive:
            per_layer.append(0.0)
            continue
        value, grad = neg_kl_total(layer.posterior, kl_mode, kl_scale)
        per_layer.append(value)
        if compute_grads:
            if grad is None:
                raise ConfigurationError("quadrature KL has no gradient; use poly or bound "
                                         "for training", field="kl")
            kl_grads[f"layer{i}.log_alpha"] = grad
    neg_kl = float(sum(per_layer))
    report = ElboReport(expected_ll, neg_kl, expected_ll + neg_kl, per_layer, ll)
    if not compute_grads:
        return report, None

    grads = model.backward(state, scale * d_logits)
    for key, g in kl_grads.items():
        grads[key] = grads[key] + g
    return report, grads


def predict(model, X, mc_samples=None, rng=None, mode=EstimatorMode.LOCAL):
    """Class probabilities.

    With ``mc_samples=None`` the mean weights are used (deterministic);
    otherwise softmax outputs are averaged over that many stochastic passes.
    """
    if mc_samples is None:
        logits, _ = model.forward(X, EstimatorMode.NONE)
        return _softmax(logits)
    if mc_samples < 1:
        raise DomainError("mc_samples must be at least 1")
    if rng is None:
        raise ConfigurationError("Monte Carlo prediction needs an RngStream")
    total = 0.0
    for _ in range(mc_samples):
        logits, _ = model.forward(X, mode, rng)
        total = total + _softmax(logits)
    return total / mc_samples


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def error_rate(model, X, y):
    probs = predict(model, X)
    return float(np.mean(np.argmax(probs, axis=1) != np.asarray(y)))


# checkpoints


def checkpoint_dict(model):
    layers = []
    for layer in model.layers:
        post = layer.posterior
        layers.append({
            "n_in": layer.n_in,
            "n_out": layer.n_out,
            "noise": layer.noise.value,
            "granularity": post.granularity.value,
            "correlated": post.correlated,
            "dropout_p": layer.dropout_p,
            "theta": post.theta.tolist(),
            "log_alpha": post.log_alpha.tolist(),
            "bias": layer.bias.tolist(),
        })
    return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "activation": model.activation.value, "layers": layers}


def save_checkpoint(model, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(checkpoint_dict(model), f, indent=1)
        f.write("\n")


def model_from_dict(d):
    if d.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"not a varigrad checkpoint (format={d.get('format')!r})")
    if d.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {d.get('version')!r}")
    layers = []
    for entry in d["layers"]:
        theta = np.array(entry["theta"], dtype=np.float64).reshape(entry["n_in"], entry["n_out"])
        post = DropoutPosterior(theta, np.array(entry["log_alpha"], dtype=np.float64),
                                Granularity(entry["granularity"]), bool(entry["correlated"]))
        layers.append(DenseVariationalLayer(post, np.array(entry["bias"], dtype=np.float64),
                                            NoiseType(entry["noise"]), float(entry["dropout_p"])))
    return Mlp(layers, Activation(d["activation"]))


def load_checkpoint(path):
    with open(path, encoding="utf-8") as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    return model_from_dict(d)

