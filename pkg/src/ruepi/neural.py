"""
Forecaster (encoder + head) and separately trained decoder for the reconstruction uncertainty estimate.

Training is plain mini-batch gradient descent on the mean squared error with early
stopping on the validation split. The decoder is fitted on latent codes of a frozen
encoder, so its reconstruction error reflects how familiar an input is to the forecaster.
"""
from dataclasses import dataclass, field

import numpy as np

from . import logger
from .exceptions import ConfigError, DataError, DimensionError, TrainingDivergedError
from .util import array_checksum, as_matrix, read_json, write_json

ACTIVATIONS = ('relu', 'tanh')


def _activate(name, z):
    if name == 'relu':
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(name, z, a):
    if name == 'relu':
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


class Mlp(object):
    """
    Fully connected network: x @ W + b per layer, hidden layers activated, output layer identity.

    weights[l] has shape (widths[l], widths[l + 1]).
    """

    def __init__(self, widths, activation, weights, biases):
        if activation not in ACTIVATIONS:
            raise ConfigError("Unknown activation '{}', expected one of {}".format(activation, ACTIVATIONS))
        self.widths = [int(w) for w in widths]
        self.activation = activation
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.widths[l], self.widths[l + 1]) or b.shape != (self.widths[l + 1],):
                raise DimensionError("Layer {} parameters do not match widths {}".format(l, self.widths))

    @classmethod
    def initialize(cls, widths, activation, rng):
        """ Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases. """
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(widths, activation, weights, biases)

    @property
    def n_in(self):
        return self.widths[0]

    @property
    def n_out(self):
        return self.widths[-1]

    def parameters(self):
        """ Live parameter arrays, weights and biases interleaved per layer. """
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        return params

    def copy(self):
        return Mlp(self.widths, self.activation, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def checksum(self):
        return array_checksum(self.parameters())

    def forward(self, x, keep=False):
        a = x
        cache = [(None, a)]
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            a = z if l == last else _activate(self.activation, z)
            if keep:
                cache.append((z, a))
        return (a, cache) if keep else a

    def backward(self, cache, grad_out):
        """
        :return: (parameter gradients aligned with parameters(), gradient w.r.t. the input)
        """
        grads = [None] * (2 * len(self.weights))
        delta = grad_out
        for l in range(len(self.weights) - 1, -1, -1):
            z, a = cache[l + 1]
            if l != len(self.weights) - 1:
                delta = delta * _activate_grad(self.activation, z, a)
            a_prev = cache[l][1]
            grads[2 * l] = a_prev.T @ delta
            grads[2 * l + 1] = delta.sum(axis=0)
            delta = delta @ self.weights[l].T
        return grads, delta

    def loss_and_grads(self, x, y):
        """ Mean squared error over rows and outputs, with its analytic gradient. """
        pred, cache = self.forward(x, keep=True)
        resid = pred - y
        loss = float(np.mean(resid ** 2))
        grads, _ = self.backward(cache, 2.0 * resid / resid.size)
        return loss, grads

    def to_dict(self):
        return {
            'widths': self.widths,
            'activation': self.activation,
            'weights': [w.ravel(order='C').tolist() for w in self.weights],
            'biases': [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, payload):
        widths = payload['widths']
        weights = [np.asarray(w, dtype=np.float64).reshape(widths[l], widths[l + 1])
                   for l, w in enumerate(payload['weights'])]
        return cls(widths, payload['activation'], weights, payload['biases'])


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    max_epochs: int = 200
    batch_size: int = 64
    patience: int = 20
    weight_decay: float = 0.0
    seed: int = 0

    def validate(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive, got {}".format(self.learning_rate))
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be nonnegative, got {}".format(self.max_epochs))
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1, got {}".format(self.batch_size))
        if self.patience < 1:
            raise ConfigError("patience must be at least 1, got {}".format(self.patience))
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative, got {}".format(self.weight_decay))
        return self


@dataclass(frozen=True)
class ModelShape:
    encoder_hidden: tuple = (64,)
    latent_width: int = 32
    head_hidden: tuple = ()
    decoder_hidden: tuple = (64,)
    activation: str = 'relu'

    def validate(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError("Unknown activation '{}', expected one of {}".format(self.activation, ACTIVATIONS))
        if self.latent_width < 1 or any(w < 1 for w in self.encoder_hidden + self.head_hidden + self.decoder_hidden):
            raise ConfigError("Layer widths must be positive")
        return self


@dataclass(eq=False)
class RueModel:
    encoder: Mlp
    head: Mlp
    decoder: Mlp = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.encoder.n_out != self.head.n_in:
            raise DimensionError("Encoder output width {} != head input width {}".format(
                self.encoder.n_out, self.head.n_in))
        if self.decoder is not None:
            if self.decoder.n_in != self.encoder.n_out or self.decoder.n_out != self.encoder.n_in:
                raise DimensionError("Decoder widths {} do not mirror the encoder".format(self.decoder.widths))

    def save(self, path):
        write_json(path, {
            'encoder': self.encoder.to_dict(),
            'head': self.head.to_dict(),
            'decoder': self.decoder.to_dict() if self.decoder is not None else None,
            'metadata': self.metadata,
        })

    @classmethod
    def load(cls, path):
        payload = read_json(path)
        decoder = Mlp.from_dict(payload['decoder']) if payload.get('decoder') else None
        return cls(encoder=Mlp.from_dict(payload['encoder']), head=Mlp.from_dict(payload['head']),
                   decoder=decoder, metadata=payload.get('metadata', {}))


@dataclass(frozen=True, eq=False)
class CalibrationErrors:
    rho: np.ndarray
    err: np.ndarray
    rho_scalar: np.ndarray

    @property
    def n(self):
        return self.rho.shape[0]


def _sgd_step(params, grads, lr, weight_decay):
    # weights sit at even positions; biases are not decayed
    for i, (p, g) in enumerate(zip(params, grads)):
        if weight_decay and i % 2 == 0:
            g = g + weight_decay * p
        p -= lr * g


def _fit(forward_backward, evaluate, snapshot, cfg, x_train, y_train, label):
    """
    Shared loop: shuffled mini-batches, validation after every epoch, best snapshot restored.
    """
    rng = np.random.default_rng(cfg.seed)
    best_loss = evaluate()
    best = snapshot()
    stale = 0
    n = x_train.shape[0]
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            loss = forward_backward(x_train[batch], y_train[batch])
            if not np.isfinite(loss):
                msg = "{} training diverged at epoch {} (learning rate {}): loss={}".format(
                    label, epoch, cfg.learning_rate, loss)
                logger.error(msg)
                raise TrainingDivergedError(msg, learning_rate=cfg.learning_rate, epoch=epoch)
        val_loss = evaluate()
        if not np.isfinite(val_loss):
            msg = "{} validation loss is not finite at epoch {} (learning rate {})".format(
                label, epoch, cfg.learning_rate)
            logger.error(msg)
            raise TrainingDivergedError(msg, learning_rate=cfg.learning_rate, epoch=epoch)
        if val_loss < best_loss:
            best_loss, best, stale = val_loss, snapshot(), 0
            logger.debug("{} epoch {}: validation loss improved to {:.6g}".format(label, epoch, val_loss))
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info("{} early stop at epoch {}; best validation loss {:.6g}".format(label, epoch, best_loss))
                break
    return best, best_loss


def _split_arrays(data, label):
    x, y = data.subset(label)
    if x.shape[0] == 0:
        raise DataError("The '{}' split is empty".format(label))
    return x, y


def train_forecaster(data, cfg, shape=ModelShape()):
    """
    Fit encoder and head jointly on the train split.

    :return: (encoder, head, best validation MSE)
    """
    cfg.validate()
    shape.validate()
    x_train, y_train = _split_arrays(data, 'train')
    x_val, y_val = _split_arrays(data, 'validation')
    rng = np.random.default_rng(cfg.seed)
    encoder = Mlp.initialize([x_train.shape[1]] + list(shape.encoder_hidden) + [shape.latent_width],
                             shape.activation, rng)
    head = Mlp.initialize([shape.latent_width] + list(shape.head_hidden) + [y_train.shape[1]], shape.activation, rng)

    def forward_backward(xb, yb):
        latent, enc_cache = encoder.forward(xb, keep=True)
        pred, head_cache = head.forward(latent, keep=True)
        resid = pred - yb
        head_grads, grad_latent = head.backward(head_cache, 2.0 * resid / resid.size)
        enc_grads, _ = encoder.backward(enc_cache, grad_latent)
        _sgd_step(head.parameters(), head_grads, cfg.learning_rate, cfg.weight_decay)
        _sgd_step(encoder.parameters(), enc_grads, cfg.learning_rate, cfg.weight_decay)
        return float(np.mean(resid ** 2))

    def evaluate():
        return float(np.mean((head.forward(encoder.forward(x_val)) - y_val) ** 2))

    def snapshot():
        return encoder.copy(), head.copy()

    (best_encoder, best_head), best_loss = _fit(forward_backward, evaluate, snapshot, cfg, x_train, y_train,
                                                'Forecaster')
    return best_encoder, best_head, best_loss


def train_decoder(encoder, data, cfg, shape=ModelShape()):
    """
    Fit the decoder on latent codes of the frozen encoder; encoder parameters are never written.

    :return: (decoder, best validation reconstruction MSE)
    """
    cfg.validate()
    shape.validate()
    x_train, _ = _split_arrays(data, 'train')
    x_val, _ = _split_arrays(data, 'validation')
    before = encoder.checksum()
    z_train = encoder.forward(x_train)
    z_val = encoder.forward(x_val)
    rng = np.random.default_rng(cfg.seed)
    decoder = Mlp.initialize([encoder.n_out] + list(shape.decoder_hidden) + [encoder.n_in], shape.activation, rng)

    def forward_backward(zb, xb):
        loss, grads = decoder.loss_and_grads(zb, xb)
        _sgd_step(decoder.parameters(), grads, cfg.learning_rate, cfg.weight_decay)
        return loss

    def evaluate():
        return float(np.mean((decoder.forward(z_val) - x_val) ** 2))

    best, best_loss = _fit(forward_backward, evaluate, decoder.copy, cfg, z_train, x_train, 'Decoder')
    after = encoder.checksum()
    logger.info("Encoder checksum before/after decoder training: {} / {}".format(before[:12], after[:12]))
    if before != after:
        raise RuntimeError("Encoder parameters changed during decoder training")
    return best, best_loss


def predict(model, inputs):
    x = as_matrix(inputs, 'inputs', model.encoder.n_in)
    return model.head.forward(model.encoder.forward(x))


def compute_errors(model, inputs, targets):
    """
    Feature-wise reconstruction errors, output-wise prediction errors and the scalar RUE.
    """
    if model.decoder is None:
        raise DataError("Model has no trained decoder")
    x = as_matrix(inputs, 'inputs', model.encoder.n_in)
    y = as_matrix(targets, 'targets', model.head.n_out)
    if x.shape[0] != y.shape[0]:
        raise DimensionError("inputs have {} rows, targets {}".format(x.shape[0], y.shape[0]))
    latent = model.encoder.forward(x)
    rho = np.abs(x - model.decoder.forward(latent))
    err = np.abs(y - model.head.forward(latent))
    return CalibrationErrors(rho=rho, err=err, rho_scalar=rho.sum(axis=1))


def feature_errors(model, inputs):
    """ Feature-wise reconstruction errors alone; needs no targets. """
    if model.decoder is None:
        raise DataError("Model has no trained decoder")
    x = as_matrix(inputs, 'inputs', model.encoder.n_in)
    return np.abs(x - model.decoder.forward(model.encoder.forward(x)))
