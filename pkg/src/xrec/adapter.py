"""Mixture-of-experts adapter from GNN space to LM hidden space."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .checkpoint import read_checkpoint, write_checkpoint


@dataclass
class AdapterConfig:
    in_dim: int = 32
    out_dim: int = 64
    num_experts: int = 8
    dropout_rate: float = 0.2
    noise_factor: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.num_experts < 1:
            raise ValueError("num_experts must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.noise_factor < 0:
            raise ValueError("noise_factor must be >= 0")


class MoeAdapter:
    """Dense-gated linear experts: ``y = sum_k softmax(G x)_k (W_k x + b_k)``.

    Training mode adds Gaussian noise (scaled by ``noise_factor``) to the gate
    logits and applies inverted dropout to ``y``.
    """

    def __init__(self, config: AdapterConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.training = True
        k, din, dout = config.num_experts, config.in_dim, config.out_dim
        if params is None:
            rng = np.random.default_rng(config.seed)
            bound = 1.0 / np.sqrt(din)
            params = {f"expert_w{j}": rng.uniform(-bound, bound, (dout, din)) for j in range(k)}
            params.update({f"expert_b{j}": rng.uniform(-bound, bound, dout) for j in range(k)})
            params["gate_w"] = rng.uniform(-bound, bound, (k, din))
        self.expert_weights = [nx.parameter(params[f"expert_w{j}"], name=f"expert_w{j}") for j in range(k)]
        self.expert_biases = [nx.parameter(params[f"expert_b{j}"], name=f"expert_b{j}") for j in range(k)]
        self.gate_weights = nx.parameter(params["gate_w"], name="gate_w")
        for w, b in zip(self.expert_weights, self.expert_biases):
            if w.shape != (dout, din) or b.shape != (dout,):
                raise ValueError("expert parameter shape does not match config")
        if self.gate_weights.shape != (k, din):
            raise ValueError("gate parameter shape does not match config")

    def train(self) -> "MoeAdapter":
        self.training = True
        return self

    def eval(self) -> "MoeAdapter":
        self.training = False
        return self

    def parameters(self) -> list[nx.Tensor]:
        return [*self.expert_weights, *self.expert_biases, self.gate_weights]

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"expert_w{j}": w.data.copy() for j, w in enumerate(self.expert_weights)}
        out.update({f"expert_b{j}": b.data.copy() for j, b in enumerate(self.expert_biases)})
        out["gate_w"] = self.gate_weights.data.copy()
        return out

    def gate(self, x, rng: np.random.Generator | None = None) -> nx.Tensor:
        x = x if isinstance(x, nx.Tensor) else nx.constant(x)
        logits = nx.matmul(self.gate_weights, x)
        if self.training and self.config.noise_factor > 0:
            rng = rng if rng is not None else np.random.default_rng()
            noise = rng.standard_normal(self.config.num_experts) * self.config.noise_factor
            logits = nx.add(logits, nx.constant(noise))
        return nx.softmax(logits)

    def __call__(self, x, rng=None) -> nx.Tensor:
        return adapt(self, x, rng)


def adapt(adapter: MoeAdapter, x, rng: np.random.Generator | None = None) -> nx.Tensor:
    """Map one ``in_dim`` vector to an ``out_dim`` adapted vector."""
    cfg = adapter.config
    x = x if isinstance(x, nx.Tensor) else nx.constant(x)
    if x.shape != (cfg.in_dim,):
        raise nx.ShapeError(f"adapt: expected input of shape ({cfg.in_dim},), got {x.shape}")
    if not np.isfinite(x.data).all():
        raise ValueError("adapt: non-finite input")
    g = adapter.gate(x, rng)
    experts = nx.concat_rows([nx.add(nx.matmul(w, x), b)
                              for w, b in zip(adapter.expert_weights, adapter.expert_biases)])
    y = nx.matmul(g, experts)
    if adapter.training and cfg.dropout_rate > 0:
        rng = rng if rng is not None else np.random.default_rng()
        keep = (rng.random(cfg.out_dim) >= cfg.dropout_rate) / (1.0 - cfg.dropout_rate)
        y = nx.multiply(y, nx.constant(keep))
    return y


def make_fixed_inputs(in_dim: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """One user and one item input vector, drawn once and reused for every sample."""
    rng = np.random.default_rng([seed, 0x5EED])
    return rng.uniform(-0.1, 0.1, in_dim), rng.uniform(-0.1, 0.1, in_dim)


def save_adapters(path, adapters: dict[str, MoeAdapter], extra: dict | None = None) -> None:
    arrays, configs = {}, {}
    for role, ad in adapters.items():
        configs[role] = asdict(ad.config)
        arrays.update({f"{role}/{k}": v for k, v in ad.state_dict().items()})
    write_checkpoint(path, "moe-adapters", configs, arrays, extra)


def load_adapters(path) -> tuple[dict[str, MoeAdapter], dict]:
    _, configs, arrays, extra = read_checkpoint(path, expect_kind="moe-adapters")
    out = {}
    for role, cfg in configs.items():
        prefix = f"{role}/"
        params = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        out[role] = MoeAdapter(AdapterConfig(**cfg), params).eval()
    return out, extra
