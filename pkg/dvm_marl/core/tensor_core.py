"""Dense network substrate with analytic gradients.

Networks are fixed-topology MLPs (affine -> ReLU -> ... -> affine). Every loss in
the framework is differentiated by hand: a loss computes its gradient with
respect to the network *output*, and ``backward`` pushes that upstream gradient
through the layers. Inputs may be a single vector ``(in,)`` or a batch
``(batch, in)``; parameter gradients are summed over the batch.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np

from dvm_marl.core.errors import NumericError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
_LOG_2 = np.log(2.0)
# tanh saturates to exactly +-1.0 in float64 for |u| > ~19
_TANH_BOUND = 1.0 - 1e-12

ArrayLike = Union[np.ndarray, Sequence[float]]


class LayerArrays:
    """Ordered per-layer weight matrices ``(out, in)`` and bias vectors ``(out,)``."""

    def __init__(self, weights: List[np.ndarray], biases: List[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ShapeError(
                f"need one bias per weight matrix, got {len(weights)} and {len(biases)}"
            )
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape}")
            if k > 0 and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(
                    f"layer {k} expects {w.shape[1]} inputs but layer {k - 1} "
                    f"produces {self.weights[k - 1].shape[0]}"
                )

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def input_size(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_size(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def sizes(self) -> List[int]:
        """Layer widths from input to output, e.g. ``[4, 8, 8, 1]``."""
        return [self.input_size] + [w.shape[0] for w in self.weights]

    def arrays(self) -> List[np.ndarray]:
        """All arrays interleaved as ``[W0, b0, W1, b1, ...]`` (no copies)."""
        out: List[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def same_shape(self, other: "LayerArrays") -> bool:
        return self.num_layers == other.num_layers and all(
            a.shape == b.shape for a, b in zip(self.arrays(), other.arrays())
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def copy(self):
        return type(self)(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases]
        )

    def zeros_like(self):
        return type(self)(
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
        )

    def __repr__(self) -> str:
        return f"{type(self).__name__}(sizes={self.sizes})"


class ParamStore(LayerArrays):
    """Parameters of one network (actor, critic or value function)."""


class Grad(LayerArrays):
    """Loss gradient, shape-congruent with the ParamStore it differentiates."""

    @classmethod
    def zeros_for(cls, net: LayerArrays) -> "Grad":
        return cls(
            [np.zeros_like(w) for w in net.weights],
            [np.zeros_like(b) for b in net.biases],
        )

    def scaled(self, factor: float) -> "Grad":
        return Grad([w * factor for w in self.weights], [b * factor for b in self.biases])

    def __add__(self, other: "Grad") -> "Grad":
        if not self.same_shape(other):
            raise ShapeError("cannot add gradients of different shapes")
        return Grad(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )


def init_params(sizes: Sequence[int], rng: np.random.Generator) -> ParamStore:
    """Initialize an MLP uniformly in +-1/sqrt(fan_in) per layer.

    Args:
        sizes: Layer widths including input and output, e.g. ``[obs, 256, 256, act]``
        rng: Random generator (the only source of randomness)

    Returns:
        Freshly initialized ParamStore
    """
    if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
        raise ShapeError(f"invalid layer sizes {list(sizes)}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return ParamStore(weights, biases)


def _as_batch(net: LayerArrays, inputs: ArrayLike) -> Tuple[np.ndarray, bool]:
    batch = np.asarray(inputs, dtype=np.float64)
    single = batch.ndim == 1
    if single:
        batch = batch[None, :]
    if batch.ndim != 2 or batch.shape[1] != net.input_size:
        raise ShapeError(
            f"network expects input width {net.input_size}, got shape {np.shape(inputs)}"
        )
    return batch, single


def _forward_trace(
    net: LayerArrays, batch: np.ndarray
) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    activations = [batch]
    pre_activations = []
    hidden = batch
    last = net.num_layers - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = hidden @ w.T + b
        pre_activations.append(z)
        hidden = np.maximum(z, 0.0) if k < last else z
        activations.append(hidden)
    return activations, pre_activations


def forward(net: ParamStore, inputs: ArrayLike) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of them."""
    batch, single = _as_batch(net, inputs)
    activations, _ = _forward_trace(net, batch)
    out = activations[-1]
    return out[0] if single else out


def backward(
    net: ParamStore, inputs: ArrayLike, upstream: ArrayLike
) -> Tuple[Grad, np.ndarray]:
    """Differentiate ``<upstream, forward(net, inputs)>``.

    Args:
        net: Network parameters
        inputs: Input vector ``(in,)`` or batch ``(batch, in)``
        upstream: Gradient of the loss with respect to the output, same leading
            shape as ``inputs``

    Returns:
        Tuple of (parameter gradient summed over the batch, input gradient)
    """
    batch, single = _as_batch(net, inputs)
    delta = np.asarray(upstream, dtype=np.float64)
    if single and delta.ndim == 1:
        delta = delta[None, :]
    if delta.shape != (batch.shape[0], net.output_size):
        raise ShapeError(
            f"upstream gradient shape {np.shape(upstream)} does not match output "
            f"({batch.shape[0]}, {net.output_size})"
        )

    activations, pre_activations = _forward_trace(net, batch)
    grad_w: List[np.ndarray] = [np.empty(0)] * net.num_layers
    grad_b: List[np.ndarray] = [np.empty(0)] * net.num_layers
    for k in reversed(range(net.num_layers)):
        grad_w[k] = delta.T @ activations[k]
        grad_b[k] = delta.sum(axis=0)
        delta = delta @ net.weights[k]
        if k > 0:
            delta = delta * (pre_activations[k - 1] > 0.0)

    return Grad(grad_w, grad_b), (delta[0] if single else delta)


@dataclass
class AdamState:
    """Adam moment accumulators for one network."""

    first_moment: Grad
    second_moment: Grad
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, net: ParamStore, learning_rate: float, **kwargs) -> "AdamState":
        return cls(
            first_moment=Grad.zeros_for(net),
            second_moment=Grad.zeros_for(net),
            learning_rate=learning_rate,
            **kwargs,
        )


def adam_step(
    net: ParamStore, grad: Grad, state: AdamState
) -> Tuple[ParamStore, AdamState]:
    """Apply one bias-corrected Adam update in place.

    Returns:
        The same (now updated) network and optimizer state
    """
    if not (net.same_shape(grad) and net.same_shape(state.first_moment)):
        raise ShapeError(f"gradient {grad!r} does not match network {net!r}")
    if not grad.is_finite():
        raise NumericError("non-finite gradient passed to adam_step")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**state.step
    correction2 = 1.0 - b2**state.step
    for param, g, m, v in zip(
        net.arrays(),
        grad.arrays(),
        state.first_moment.arrays(),
        state.second_moment.arrays(),
    ):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        param -= state.learning_rate * (m / correction1) / (
            np.sqrt(v / correction2) + state.eps
        )
    return net, state


def polyak_average(target: ParamStore, source: ParamStore, rho: float) -> ParamStore:
    """In place ``target <- (1 - rho) * target + rho * source``."""
    if not target.same_shape(source):
        raise ShapeError(f"cannot average {source!r} into {target!r}")
    for t, s in zip(target.arrays(), source.arrays()):
        t *= 1.0 - rho
        t += rho * s
    return target


def copy_params(target: ParamStore, source: ParamStore) -> ParamStore:
    """In place bitwise copy of ``source`` into ``target``."""
    if not target.same_shape(source):
        raise ShapeError(f"cannot copy {source!r} into {target!r}")
    for t, s in zip(target.arrays(), source.arrays()):
        np.copyto(t, s)
    return target


@dataclass
class CategoricalDist:
    """Probabilities over K discrete actions (last axis)."""

    probs: np.ndarray

    def greedy(self) -> np.ndarray:
        return np.argmax(self.probs, axis=-1)


def softmax_with_temperature(logits: ArrayLike, tau: float) -> CategoricalDist:
    """Temperature softmax ``p_i = exp(l_i / tau) / sum_j exp(l_j / tau)``."""
    if not tau > 0.0 or not np.isfinite(tau):
        raise ParameterError(f"softmax temperature must be > 0, got {tau}")
    z = np.asarray(logits, dtype=np.float64) / tau
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return CategoricalDist(e / np.sum(e, axis=-1, keepdims=True))


def softmax_backward(probs: np.ndarray, upstream: np.ndarray, tau: float) -> np.ndarray:
    """Gradient w.r.t. logits of ``<upstream, softmax(logits / tau)>``."""
    inner = np.sum(upstream * probs, axis=-1, keepdims=True)
    return probs * (upstream - inner) / tau


def kl_categorical(p: CategoricalDist, q: CategoricalDist) -> Union[float, np.ndarray]:
    """``sum_a p(a) log(p(a) / q(a))`` over the last axis; 0 log 0 counts as 0."""
    pp = np.asarray(p.probs, dtype=np.float64)
    qq = np.asarray(q.probs, dtype=np.float64)
    if pp.shape != qq.shape:
        raise ShapeError(f"KL between shapes {pp.shape} and {qq.shape}")
    positive = pp > 0.0
    safe_p = np.where(positive, pp, 1.0)
    terms = np.where(positive, pp * (np.log(safe_p) - np.log(qq)), 0.0)
    total = np.sum(terms, axis=-1)
    return float(total) if np.ndim(total) == 0 else total


def one_hot(indices: ArrayLike, num_classes: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    return np.eye(num_classes, dtype=np.float64)[idx]


def gumbel_softmax(logits: np.ndarray, temperature: float, uniform: np.ndarray) -> np.ndarray:
    """Relaxed one-hot sample ``softmax((logits + g) / temperature)``.

    ``uniform`` holds U(0,1) draws turned into Gumbel noise ``-log(-log u)``;
    passing it explicitly keeps the relaxation differentiable and reproducible.
    """
    u = np.clip(uniform, 1e-12, 1.0 - 1e-12)
    gumbel = -np.log(-np.log(u))
    return softmax_with_temperature(np.asarray(logits) + gumbel, temperature).probs


def gumbel_softmax_backward(
    sample: np.ndarray, upstream: np.ndarray, temperature: float
) -> np.ndarray:
    """Gradient w.r.t. logits, given the relaxed ``sample`` from ``gumbel_softmax``."""
    return softmax_backward(sample, upstream, temperature)


@dataclass
class SquashedGaussianDist:
    """Diagonal Gaussian whose samples are squashed through tanh."""

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_std = np.clip(
            np.asarray(self.log_std, dtype=np.float64), LOG_STD_MIN, LOG_STD_MAX
        )
        if self.mean.shape != self.log_std.shape:
            raise ShapeError(
                f"mean {self.mean.shape} and log-stddev {self.log_std.shape} differ"
            )

    @classmethod
    def from_output(cls, output: np.ndarray) -> "SquashedGaussianDist":
        """Split an actor output ``[mean | log_std]`` along the last axis."""
        out = np.asarray(output, dtype=np.float64)
        half = out.shape[-1] // 2
        if out.shape[-1] != 2 * half:
            raise ShapeError(f"actor output width {out.shape[-1]} is not even")
        return cls(out[..., :half], out[..., half:])

    def deterministic(self) -> np.ndarray:
        return np.tanh(self.mean)


def _log1m_tanh_sq(u: np.ndarray) -> np.ndarray:
    # log(1 - tanh(u)^2), stable for large |u|
    return 2.0 * (_LOG_2 - u - np.logaddexp(0.0, -2.0 * u))


def squashed_gaussian_sample(
    dist: SquashedGaussianDist, noise: np.ndarray
) -> Tuple[np.ndarray, Union[float, np.ndarray]]:
    """Reparameterized sample ``tanh(mean + std * noise)`` and its log-density.

    The log-density includes the tanh change-of-variables correction and is
    summed over the action dimensions (last axis).
    """
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != dist.mean.shape:
        raise ShapeError(f"noise {noise.shape} does not match mean {dist.mean.shape}")
    pre_squash = dist.mean + np.exp(dist.log_std) * noise
    action = np.clip(np.tanh(pre_squash), -_TANH_BOUND, _TANH_BOUND)
    log_prob = np.sum(
        -0.5 * noise**2 - dist.log_std - _HALF_LOG_2PI - _log1m_tanh_sq(pre_squash),
        axis=-1,
    )
    return action, (float(log_prob) if np.ndim(log_prob) == 0 else log_prob)


def squashed_gaussian_backward(
    mean: np.ndarray,
    raw_log_std: np.ndarray,
    noise: np.ndarray,
    grad_action: np.ndarray,
    grad_log_prob: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of ``<grad_action, a> + <grad_log_prob, log_prob>``.

    Args:
        mean: Pre-squash means ``(..., D)``
        raw_log_std: Unclamped log-stddev as produced by the actor ``(..., D)``
        noise: Frozen standard-normal noise ``(..., D)``
        grad_action: Loss gradient w.r.t. the squashed action ``(..., D)``
        grad_log_prob: Loss gradient w.r.t. the summed log-density ``(...)``

    Returns:
        Tuple of (gradient w.r.t. mean, gradient w.r.t. raw log-stddev); the
        latter is zero wherever the clamp is active.
    """
    log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
    std = np.exp(log_std)
    squashed = np.tanh(mean + std * noise)
    glp = np.asarray(grad_log_prob, dtype=np.float64)[..., None]
    # d/du tanh(u) = 1 - tanh^2;  d/du [-log(1 - tanh^2)] = 2 tanh(u)
    grad_pre = grad_action * (1.0 - squashed**2) + glp * 2.0 * squashed
    grad_mean = grad_pre
    grad_log_std = grad_pre * noise * std - glp
    inside = (raw_log_std >= LOG_STD_MIN) & (raw_log_std <= LOG_STD_MAX)
    return grad_mean, grad_log_std * inside


def kl_gaussian(
    mean_p: np.ndarray, log_std_p: np.ndarray, mean_q: np.ndarray, log_std_q: np.ndarray
) -> np.ndarray:
    """Elementwise ``KL(N(mean_p, std_p) || N(mean_q, std_q))``."""
    var_p = np.exp(2.0 * log_std_p)
    var_q = np.exp(2.0 * log_std_q)
    return log_std_q - log_std_p + (var_p + (mean_p - mean_q) ** 2) / (2.0 * var_q) - 0.5


def kl_gaussian_backward(
    mean_p: np.ndarray, log_std_p: np.ndarray, mean_q: np.ndarray, log_std_q: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of the elementwise Gaussian KL w.r.t. ``mean_q`` and ``log_std_q``."""
    var_p = np.exp(2.0 * log_std_p)
    var_q = np.exp(2.0 * log_std_q)
    grad_mean_q = (mean_q - mean_p) / var_q
    grad_log_std_q = 1.0 - (var_p + (mean_p - mean_q) ** 2) / var_q
    return grad_mean_q, grad_log_std_q
