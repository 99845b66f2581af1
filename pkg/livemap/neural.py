# SPDX-License-Identifier: MIT

'''
Dense networks with exact backpropagation, an adaptive-moment optimizer and the
variational autoencoder that turns object signatures into latent features.
'''

from __future__ import annotations

import dataclasses
import pathlib
import struct

from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from . import LiveMapError


FloatArray = npt.NDArray[np.float64]

_MAGIC = b'LMNN'


class NetworkError(LiveMapError):
    pass


class DimensionMismatchError(NetworkError):
    pass


class StaleTapeError(NetworkError):
    pass


class ArchitectureMismatchError(NetworkError):
    pass


class Tape(NamedTuple):
    '''Activations recorded by :py:meth:`DenseNet.forward`.'''
    version: int
    batched: bool
    inputs: List[FloatArray]
    pre_activations: List[FloatArray]


class Gradients(NamedTuple):
    weights: List[FloatArray]
    biases: List[FloatArray]
    inputs: FloatArray


class DenseNet:
    '''
    Fully-connected network: affine + leaky rectifier on every hidden layer and
    a linear output layer. ``weights[i]`` has shape ``(layer_dims[i], layer_dims[i + 1])``.
    '''

    def __init__(
        self,
        layer_dims: Sequence[int],
        weights: Sequence[FloatArray],
        biases: Sequence[FloatArray],
        *,
        slope: float = 0.01,
    ) -> None:
        if len(layer_dims) < 2:
            raise NetworkError(f'A network needs at least two layer dims, got {list(layer_dims)}')
        if len(weights) != len(layer_dims) - 1 or len(biases) != len(layer_dims) - 1:
            raise DimensionMismatchError('Parameter count does not match the layer dims')
        self.layer_dims = [int(dim) for dim in layer_dims]
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != expected or b.shape != (expected[1],):
                raise DimensionMismatchError(f'Layer {i}: got {w.shape}/{b.shape}, expected {expected}/({expected[1]},)')
        self.slope = slope
        self._version = 0

    @classmethod
    def initialize(cls, layer_dims: Sequence[int], rng: np.random.Generator, *, slope: float = 0.01) -> DenseNet:
        '''He-initialised weights, zero biases.'''
        weights = [
            rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:])
        ]
        biases = [np.zeros(dim) for dim in layer_dims[1:]]
        return cls(layer_dims, weights, biases, slope=slope)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def parameters(self) -> List[FloatArray]:
        '''Parameters in layer order: ``W0, b0, W1, b1, ...``.'''
        out: List[FloatArray] = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def touch(self) -> None:
        '''Marks the parameters as modified, invalidating outstanding tapes.'''
        self._version += 1

    def copy(self) -> DenseNet:
        return DenseNet(self.layer_dims, self.weights, self.biases, slope=self.slope)

    def same_architecture(self, other: DenseNet) -> bool:
        return self.layer_dims == other.layer_dims and self.slope == other.slope

    def forward(self, x: npt.ArrayLike) -> Tuple[FloatArray, Tape]:
        '''Accepts a single vector or a ``(batch, input_dim)`` matrix.'''
        a = np.asarray(x, dtype=np.float64)
        batched = a.ndim == 2
        if not batched:
            a = a.reshape(1, -1)
        if a.ndim != 2 or a.shape[1] != self.input_dim:
            raise DimensionMismatchError(f'Expected input dim {self.input_dim}, got shape {np.shape(x)}')
        inputs, pre = [], []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(a)
            z = a @ w + b
            pre.append(z)
            a = z if i == last else np.where(z > 0, z, self.slope * z)
        y = a if batched else a[0]
        return y, Tape(self._version, batched, inputs, pre)

    def __call__(self, x: npt.ArrayLike) -> FloatArray:
        return self.forward(x)[0]

    def backward(self, tape: Tape, dy: npt.ArrayLike) -> Gradients:
        '''Gradients of ``sum(dy * y)`` with respect to every parameter and the input.'''
        if tape.version != self._version:
            raise StaleTapeError('Parameters changed since the tape was recorded')
        delta = np.asarray(dy, dtype=np.float64)
        if not tape.batched:
            delta = delta.reshape(1, -1)
        if delta.shape != tape.pre_activations[-1].shape:
            raise DimensionMismatchError(f'Upstream gradient shape {np.shape(dy)} does not match the output')
        grad_w: List[FloatArray] = [np.empty(0)] * len(self.weights)
        grad_b: List[FloatArray] = [np.empty(0)] * len(self.weights)
        for i in reversed(range(len(self.weights))):
            if i != len(self.weights) - 1:
                delta = delta * np.where(tape.pre_activations[i] > 0, 1.0, self.slope)
            grad_w[i] = tape.inputs[i].T @ delta
            grad_b[i] = delta.sum(axis=0)
            delta = delta @ self.weights[i].T
        dx = delta if tape.batched else delta[0]
        return Gradients(grad_w, grad_b, dx)


def forward(net: DenseNet, x: npt.ArrayLike) -> Tuple[FloatArray, Tape]:
    return net.forward(x)


def backward(net: DenseNet, tape: Tape, dy: npt.ArrayLike) -> Gradients:
    return net.backward(tape, dy)


@dataclasses.dataclass
class OptimizerState:
    '''Adaptive-moment (Adam) state, moments stored in parameter order.'''
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moments: List[FloatArray] = dataclasses.field(default_factory=list)
    second_moments: List[FloatArray] = dataclasses.field(default_factory=list)

    @classmethod
    def for_net(cls, net: DenseNet, learning_rate: float = 5e-4, **kwargs: float) -> OptimizerState:
        return cls(
            learning_rate=learning_rate,
            first_moments=[np.zeros_like(p) for p in net.parameters],
            second_moments=[np.zeros_like(p) for p in net.parameters],
            **kwargs,  # type: ignore[arg-type]
        )


def step(net: DenseNet, grads: Gradients, opt: OptimizerState) -> None:
    params = net.parameters
    flat: List[FloatArray] = []
    for gw, gb in zip(grads.weights, grads.biases):
        flat += [gw, gb]
    if not opt.first_moments:
        opt.first_moments = [np.zeros_like(p) for p in params]
        opt.second_moments = [np.zeros_like(p) for p in params]
    if len(flat) != len(params) or any(g.shape != p.shape for g, p in zip(flat, params)):
        raise DimensionMismatchError('Gradient shapes do not match the network parameters')

    opt.step_count += 1
    correction1 = 1 - opt.beta1 ** opt.step_count
    correction2 = 1 - opt.beta2 ** opt.step_count
    for p, g, m, v in zip(params, flat, opt.first_moments, opt.second_moments):
        m *= opt.beta1
        m += (1 - opt.beta1) * g
        v *= opt.beta2
        v += (1 - opt.beta2) * g * g
        p -= opt.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + opt.epsilon)
    net.touch()


def save_net(net: DenseNet, path: Union[str, pathlib.Path]) -> None:
    '''
    Binary layout: ``LMNN``, uint32 dim count, uint32 dims, float64 leaky slope,
    then float64 parameters in layer order (weights row-major, then biases).
    Everything little-endian.
    '''
    with open(path, 'wb') as f:
        f.write(_MAGIC)
        f.write(struct.pack(f'<I{len(net.layer_dims)}I', len(net.layer_dims), *net.layer_dims))
        f.write(struct.pack('<d', net.slope))
        for p in net.parameters:
            f.write(np.ascontiguousarray(p, dtype='<f8').tobytes())


def load_net(path: Union[str, pathlib.Path]) -> DenseNet:
    data = pathlib.Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise NetworkError(f'{path} is not a network file')
    offset = 4
    (count,) = struct.unpack_from('<I', data, offset)
    offset += 4
    dims = list(struct.unpack_from(f'<{count}I', data, offset))
    offset += 4 * count
    (slope,) = struct.unpack_from('<d', data, offset)
    offset += 8
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(data, dtype='<f8', count=fan_in * fan_out, offset=offset).reshape(fan_in, fan_out)
        offset += 8 * fan_in * fan_out
        b = np.frombuffer(data, dtype='<f8', count=fan_out, offset=offset)
        offset += 8 * fan_out
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    if offset != len(data):
        raise NetworkError(f'{path} has {len(data) - offset} trailing bytes')
    return DenseNet(dims, weights, biases, slope=slope)


# variational autoencoder


@dataclasses.dataclass
class VaeModel:
    '''Encoder emits ``[mu, logvar]`` (2 x latent dims); the decoder maps a latent back to a signature.'''
    encoder: DenseNet
    decoder: DenseNet

    def __post_init__(self) -> None:
        if self.encoder.output_dim != 2 * self.latent_dim:
            raise ArchitectureMismatchError('Encoder output must hold mean and log-variance')
        if self.encoder.input_dim != self.decoder.output_dim:
            raise ArchitectureMismatchError('Decoder output must match the signature dimension')

    @property
    def latent_dim(self) -> int:
        return self.decoder.input_dim

    @property
    def signature_dim(self) -> int:
        return self.encoder.input_dim

    @classmethod
    def initialize(
        cls,
        rng: np.random.Generator,
        *,
        signature_dim: int = 64,
        hidden: Sequence[int] = (128,),
        latent_dim: int = 25,
    ) -> VaeModel:
        encoder = DenseNet.initialize([signature_dim, *hidden, 2 * latent_dim], rng)
        decoder = DenseNet.initialize([latent_dim, *reversed(hidden), signature_dim], rng)
        return cls(encoder, decoder)


class VaeLoss(NamedTuple):
    loss: float
    reconstruction: float
    kl: float
    encoder: Gradients
    decoder: Gradients


def kl_divergence(mu: npt.ArrayLike, logvar: npt.ArrayLike) -> FloatArray:
    '''Closed-form ``KL[N(mu, exp(logvar)) || N(0, 1)]`` summed over the last axis.'''
    mu_a = np.asarray(mu, dtype=np.float64)
    lv = np.asarray(logvar, dtype=np.float64)
    return np.asarray(0.5 * np.sum(mu_a ** 2 + np.exp(lv) - 1.0 - lv, axis=-1))


def vae_loss(model: VaeModel, x: npt.ArrayLike, noise: npt.ArrayLike) -> VaeLoss:
    '''
    Squared-error reconstruction plus the closed-form KL term, averaged over the
    batch, with gradients for both networks. ``noise`` is the reparameterisation
    sample: ``z = mu + exp(logvar / 2) * noise``.
    '''
    xs = np.atleast_2d(np.asarray(x, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    if xs.shape[1] != model.signature_dim:
        raise DimensionMismatchError(f'Signature dim {xs.shape[1]} != {model.signature_dim}')
    if eps.shape != (xs.shape[0], model.latent_dim):
        raise DimensionMismatchError(f'Noise shape {eps.shape} != {(xs.shape[0], model.latent_dim)}')
    n = xs.shape[0]
    k = model.latent_dim

    stats, enc_tape = model.encoder.forward(xs)
    mu, logvar = stats[:, :k], stats[:, k:]
    sigma = np.exp(0.5 * logvar)
    z = mu + sigma * eps
    recon, dec_tape = model.decoder.forward(z)

    residual = recon - xs
    reconstruction = float(np.sum(residual ** 2)) / n
    kl = float(np.sum(kl_divergence(mu, logvar))) / n

    dec_grads = model.decoder.backward(dec_tape, 2.0 * residual / n)
    dz = dec_grads.inputs
    d_mu = dz + mu / n
    d_logvar = dz * eps * 0.5 * sigma + 0.5 * (np.exp(logvar) - 1.0) / n
    enc_grads = model.encoder.backward(enc_tape, np.concatenate([d_mu, d_logvar], axis=1))
    return VaeLoss(reconstruction + kl, reconstruction, kl, enc_grads, dec_grads)


def extract_feature(model: VaeModel, x: npt.ArrayLike) -> FloatArray:
    '''Encoder mean, the deterministic latent feature of a signature (or a batch of them).'''
    stats = model.encoder(x)
    return np.asarray(stats[..., :model.latent_dim])


def train_vae(
    model: VaeModel,
    signatures: npt.ArrayLike,
    *,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
    learning_rate: float = 1e-3,
    encoder_opt: Optional[OptimizerState] = None,
    decoder_opt: Optional[OptimizerState] = None,
) -> List[float]:
    '''Mini-batch training; returns the mean loss of every epoch.'''
    data = np.asarray(signatures, dtype=np.float64)
    encoder_opt = encoder_opt or OptimizerState.for_net(model.encoder, learning_rate)
    decoder_opt = decoder_opt or OptimizerState.for_net(model.decoder, learning_rate)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(data), batch_size):
            batch = data[order[start:start + batch_size]]
            result = vae_loss(model, batch, rng.standard_normal((len(batch), model.latent_dim)))
            step(model.encoder, result.encoder, encoder_opt)
            step(model.decoder, result.decoder, decoder_opt)
            losses.append(result.loss * len(batch))
        history.append(float(np.sum(losses)) / len(data))
    return history
