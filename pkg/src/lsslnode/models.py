"""Networks for longitudinal pretraining and the downstream heads.

All layers are dense; inputs are batches ``[n, features]`` (single vectors
also work). Parameters are plain :class:`Tensor` leaves collected by
:meth:`Module.named_parameters` in attribute order, which fixes the
checkpoint layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autodiff import Tensor, concat, leaky_relu, linear, sigmoid, tanh
from .odesolve import SolverConfig, odeint

__all__ = [
    "MODES",
    "LossWeights",
    "Module",
    "Dense",
    "Encoder",
    "Decoder",
    "DirectionNet",
    "DynamicsNet",
    "RecurrentHead",
    "MLPHead",
    "NodeClassifier",
    "ModelBundle",
    "init_bundle",
    "encode_pair",
    "encode_predict_next",
    "node_cls_forward",
]

INPUT_DIM = 32
LATENT_DIM = 64
HIDDEN_DIM = 128
N_GRADES = 5


@dataclass(frozen=True)
class LossWeights:
    recon: float = 1.0
    direction: float = 1.0

    def __post_init__(self):
        if self.recon < 0 or self.direction < 0:
            raise ValueError("loss weights must be non-negative")
        if self.recon == 0 and self.direction == 0:
            raise ValueError("at least one loss weight must be positive")


# mode -> (default weights, uses NODE)
MODES: dict[str, tuple[LossWeights, bool]] = {
    "AE": (LossWeights(recon=1.0, direction=0.0), False),
    "AE_NODE": (LossWeights(recon=1.0, direction=0.0), True),
    "LSSL": (LossWeights(recon=1.0, direction=1.0), False),
    "LSSL_NODE": (LossWeights(recon=1.0, direction=1.0), True),
    "S_LSSL": (LossWeights(recon=0.0, direction=1.0), False),
    "S_LSSL_NODE": (LossWeights(recon=0.0, direction=1.0), True),
}


def mode_for(weights: LossWeights, node: bool) -> str:
    """The mode name implied by a pair of loss weights."""
    if weights.direction == 0:
        base = "AE"
    elif weights.recon == 0:
        base = "S_LSSL"
    else:
        base = "LSSL"
    return base + ("_NODE" if node else "")


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + key + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield from m.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        w = np.zeros((n_in, n_out)) if zero else _kaiming_uniform(rng, n_in, n_out)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)


class Encoder(Module):
    def __init__(self, rng: np.random.Generator, input_dim: int = INPUT_DIM, latent_dim: int = LATENT_DIM,
                 hidden: int = HIDDEN_DIM):
        self.fc1 = Dense(input_dim, hidden, rng)
        self.fc2 = Dense(hidden, latent_dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(tanh(self.fc1(x)))


class Decoder(Module):
    def __init__(self, rng: np.random.Generator, input_dim: int = INPUT_DIM, latent_dim: int = LATENT_DIM,
                 hidden: int = HIDDEN_DIM):
        self.fc1 = Dense(latent_dim, hidden, rng)
        self.fc2 = Dense(hidden, input_dim, rng)

    def __call__(self, z: Tensor) -> Tensor:
        return self.fc2(tanh(self.fc1(z)))


class DirectionNet(Module):
    """A single dense layer applied to a constant all-ones input."""

    def __init__(self, rng: np.random.Generator, latent_dim: int = LATENT_DIM):
        self.fc = Dense(latent_dim, latent_dim, rng)
        self.latent_dim = latent_dim

    def __call__(self) -> Tensor:
        return self.fc(Tensor(np.ones(self.latent_dim)))


class DynamicsNet(Module):
    """``u(t, z)``: tanh MLP over ``[z, t]``. The output layer starts at zero."""

    def __init__(self, rng: np.random.Generator, latent_dim: int = LATENT_DIM):
        self.fc1 = Dense(latent_dim + 1, latent_dim, rng)
        self.fc2 = Dense(latent_dim, latent_dim, rng, zero=True)

    def __call__(self, t, z: Tensor) -> Tensor:
        if z.ndim == 1:
            tcol = Tensor(np.array([float(t)]))
        else:
            tcol = Tensor(np.broadcast_to(np.asarray(t, dtype=np.float64), (z.shape[0],)).reshape(-1, 1))
        return self.fc2(tanh(self.fc1(concat([z, tcol], axis=-1))))


class RecurrentHead(Module):
    """LSTM over a sequence of latents, then a linear layer to class logits."""

    def __init__(self, rng: np.random.Generator, latent_dim: int = LATENT_DIM, hidden: int = LATENT_DIM,
                 n_out: int = N_GRADES):
        self.hidden = hidden
        self.wx = Tensor(_kaiming_uniform(rng, latent_dim, 4 * hidden), requires_grad=True)
        self.wh = Tensor(_kaiming_uniform(rng, hidden, 4 * hidden), requires_grad=True)
        self.b = Tensor(np.zeros(4 * hidden), requires_grad=True)
        self.out = Dense(hidden, n_out, rng)

    def __call__(self, seq: list[Tensor]) -> Tensor:
        n = seq[0].shape[0]
        hd = self.hidden
        h = Tensor(np.zeros((n, hd)))
        c = Tensor(np.zeros((n, hd)))
        for x in seq:
            gates = linear(x, self.wx, self.b) + linear(h, self.wh)
            i = sigmoid(gates[:, :hd])
            f = sigmoid(gates[:, hd : 2 * hd])
            g = tanh(gates[:, 2 * hd : 3 * hd])
            o = sigmoid(gates[:, 3 * hd :])
            c = f * c + i * g
            h = o * tanh(c)
        return self.out(h)


class MLPHead(Module):
    def __init__(self, rng: np.random.Generator, n_out: int, latent_dim: int = LATENT_DIM):
        self.fc1 = Dense(latent_dim, 1024, rng)
        self.fc2 = Dense(1024, 64, rng)
        self.fc3 = Dense(64, n_out, rng)

    def __call__(self, z: Tensor) -> Tensor:
        return self.fc3(leaky_relu(self.fc2(leaky_relu(self.fc1(z)))))


class NodeClassifier(Module):
    """Backbone, then the latent flow over ``[0, dt]``, then an MLP over grades."""

    def __init__(self, encoder: Encoder, dynamics: DynamicsNet, head: MLPHead):
        self.encoder = encoder
        self.dynamics = dynamics
        self.head = head

    def __call__(self, x: Tensor, dt, cfg: SolverConfig | None = None, grad_mode: str = "adjoint",
                 stats: dict | None = None) -> Tensor:
        z = self.encoder(x)
        dt = np.asarray(dt, dtype=np.float64)
        if np.any(dt < 0):
            raise ValueError("elapsed time must be non-negative")
        z_next = odeint(self.dynamics, z, np.zeros_like(dt), dt, cfg, grad_mode=grad_mode, stats=stats)
        return self.head(z_next)


class ModelBundle(Module):
    """The trainable state for one pretraining mode."""

    def __init__(self, mode: str, weights: LossWeights, encoder: Encoder, decoder: Decoder | None,
                 direction: DirectionNet | None, dynamics: DynamicsNet | None):
        self.mode = mode
        self.weights = weights
        self.encoder = encoder
        self.decoder = decoder
        self.direction = direction
        self.dynamics = dynamics

    @property
    def node(self) -> bool:
        return self.dynamics is not None


def _component_rng(seed: int, component: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), component]))


# stable per-component streams: the encoder of every mode starts identical for one seed
ENCODER_STREAM, DECODER_STREAM, DIRECTION_STREAM, DYNAMICS_STREAM, HEAD_STREAM = range(5)


def init_bundle(mode: str, seed: int, weights: LossWeights | None = None, input_dim: int = INPUT_DIM,
                latent_dim: int = LATENT_DIM) -> ModelBundle:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {sorted(MODES)}")
    default, node = MODES[mode]
    weights = weights or default
    if mode_for(weights, node) != mode:
        raise ValueError(
            f"mode {mode} is inconsistent with lambda_recon={weights.recon}, lambda_dir={weights.direction}"
        )
    encoder = Encoder(_component_rng(seed, ENCODER_STREAM), input_dim, latent_dim)
    decoder = Decoder(_component_rng(seed, DECODER_STREAM), input_dim, latent_dim) if weights.recon > 0 else None
    direction = DirectionNet(_component_rng(seed, DIRECTION_STREAM), latent_dim) if weights.direction > 0 else None
    dynamics = DynamicsNet(_component_rng(seed, DYNAMICS_STREAM), latent_dim) if node else None
    return ModelBundle(mode, weights, encoder, decoder, direction, dynamics)


def head_rng(seed: int, task: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), HEAD_STREAM, task]))


def encode_pair(bundle: ModelBundle, x_i: Tensor, x_j: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    if x_i.shape != x_j.shape:
        raise ValueError(f"pair shapes differ: {x_i.shape} vs {x_j.shape}")
    z_i = bundle.encoder(x_i)
    z_j = bundle.encoder(x_j)
    return z_i, z_j, z_j - z_i


def encode_predict_next(bundle: ModelBundle, x_i: Tensor, t_i, t_j, cfg: SolverConfig | None = None,
                        grad_mode: str = "adjoint", stats: dict | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Latent of the next visit predicted from the first image of the pair only."""
    if bundle.dynamics is None:
        raise ValueError(f"mode {bundle.mode} has no dynamics network")
    t_i = np.asarray(t_i, dtype=np.float64)
    t_j = np.asarray(t_j, dtype=np.float64)
    if np.any(t_j < t_i):
        raise ValueError("next visit must not precede the current one")
    z_i = bundle.encoder(x_i)
    dt = t_j - t_i
    z_node = odeint(bundle.dynamics, z_i, np.zeros_like(dt), dt, cfg, grad_mode=grad_mode, stats=stats)
    return z_i, z_node, z_node - z_i


def node_cls_forward(model: NodeClassifier, x_i: Tensor, dt, cfg: SolverConfig | None = None) -> Tensor:
    return model(x_i, dt, cfg)
