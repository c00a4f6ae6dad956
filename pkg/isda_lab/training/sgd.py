"""Mini-batch SGD with Nesterov momentum, L2 weight decay and step-wise learning rates."""

from dataclasses import dataclass, field

import numpy as np

from isda_lab.errors import DomainError
from isda_lab.guardrails import require_non_negative


def is_decayed(name: str) -> bool:
    """Weight decay applies to weight matrices only, never to biases."""
    return name.endswith(".weight")


@dataclass(frozen=True)
class SgdConfig:
    """
    Learning rate ``lr`` multiplied by ``gamma`` at each epoch listed in ``milestones``.
    """

    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise DomainError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise DomainError(f"momentum must lie in [0, 1), got {self.momentum}")
        require_non_negative(self.weight_decay, "weight_decay")
        require_non_negative(self.gamma, "gamma")
        milestones = tuple(int(m) for m in self.milestones)
        if list(milestones) != sorted(milestones) or any(m < 1 for m in milestones):
            raise DomainError(f"milestones must be increasing positive epochs, got {milestones}")
        object.__setattr__(self, "milestones", milestones)

    def learning_rate(self, epoch: int) -> float:
        """Learning rate in effect during 0-based ``epoch``."""
        drops = sum(1 for m in self.milestones if epoch >= m)
        return self.lr * self.gamma**drops


@dataclass
class SgdState:
    config: SgdConfig
    velocities: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0


class NesterovSGD:
    """
    Updates parameter arrays in place:

        g <- g + weight_decay * theta      (weights only)
        v <- mu v - lr g
        theta <- theta + mu v - lr g
    """

    def __init__(self, params: dict[str, np.ndarray], config: SgdConfig | None = None):
        self.params = params
        cfg = config or SgdConfig()
        self.state = SgdState(cfg, {name: np.zeros_like(p) for name, p in params.items()})

    @property
    def config(self) -> SgdConfig:
        return self.state.config

    def step(self, grads: dict[str, np.ndarray], epoch: int) -> None:
        missing = set(self.params) - set(grads)
        if missing:
            raise DomainError(f"missing gradients for {sorted(missing)}")
        cfg = self.state.config
        lr = cfg.learning_rate(epoch)
        mu = cfg.momentum
        for name, param in self.params.items():
            g = grads[name]
            if g.shape != param.shape:
                raise DomainError(f"gradient for {name} has shape {g.shape}, not {param.shape}")
            if cfg.weight_decay and is_decayed(name):
                g = g + cfg.weight_decay * param
            v = self.state.velocities[name]
            v *= mu
            v -= lr * g
            param += mu * v - lr * g
        self.state.steps += 1

    def load_velocities(self, velocities: dict[str, np.ndarray], steps: int = 0) -> None:
        for name, v in velocities.items():
            if name not in self.state.velocities:
                raise DomainError(f"unknown parameter {name!r} in saved velocities")
            if v.shape != self.state.velocities[name].shape:
                raise DomainError(f"saved velocity for {name} has shape {v.shape}")
            self.state.velocities[name][...] = v
        self.state.steps = int(steps)
