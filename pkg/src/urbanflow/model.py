"""The physics-guided network.

A spatio-temporal block encoder maps the flow window to a latent density
field z_T; the residual physics step adds spectrally filtered last-step
inflow minus outflow (discrete variant) or integrates the same flux field
with fixed-step RK4 (continuous variant); a per-node MLP decodes z into
inflow/outflow predictions. Dropout layers draw masks from an explicit
seeded generator and can be forced active at inference for MC uncertainty.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, TrainingError
from .graph import GraphOperator
from .seeding import derive_seed

VARIANTS = ("pn_dis", "pn_con")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    n_st_blocks: int = 2
    chebyshev_order: int = 3
    temporal_kernel: int = 3
    dropout_rate: float = 0.1
    variant: str = "pn_dis"
    integrator_steps: int = 1

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.integrator_steps < 1:
            raise ConfigError("integrator_steps must be >= 1")
        if self.n_st_blocks < 1 or self.chebyshev_order < 1 or self.temporal_kernel < 1:
            raise ConfigError("block count, Chebyshev order and temporal kernel must be >= 1")


class SeededDropout(nn.Module):
    """Dropout whose mask stream comes from an explicit generator.

    `force_active` keeps masks on in eval mode (MC inference). With a shared
    generator the mask sequence is fully determined by the last seed set on it.
    """

    def __init__(self, p: float):
        super().__init__()
        self.p = float(p)
        self.generator: torch.Generator | None = None
        self.force_active = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.p <= 0.0 or not (self.training or self.force_active):
            return x
        keep = torch.rand(x.shape, generator=self.generator,
                          device=x.device, dtype=x.dtype) >= self.p
        return x * keep.to(x.dtype) / (1.0 - self.p)


class ChebGraphConv(nn.Module):
    """Spectral graph convolution sum_k T_k(L~) x W_k via the Chebyshev recurrence."""

    def __init__(self, c_in: int, c_out: int, order: int, bias: bool = True):
        super().__init__()
        self.order = order
        self.weight = nn.Parameter(torch.empty(order, c_in, c_out))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None
        self.reset_parameters()

    def reset_parameters(self):
        for k in range(self.order):
            nn.init.xavier_uniform_(self.weight[k])
        with torch.no_grad():
            self.weight.mul_(1.0 / np.sqrt(self.order))

    def forward(self, x: torch.Tensor, lt: torch.Tensor) -> torch.Tensor:
        # x: (..., M, C_in), lt: (M, M)
        t_prev = x
        out = torch.matmul(t_prev, self.weight[0])
        if self.order > 1:
            t_cur = torch.einsum("mn,...nc->...mc", lt, x)
            out = out + torch.matmul(t_cur, self.weight[1])
            for k in range(2, self.order):
                t_next = 2.0 * torch.einsum("mn,...nc->...mc", lt, t_cur) - t_prev
                out = out + torch.matmul(t_next, self.weight[k])
                t_prev, t_cur = t_cur, t_next
        if self.bias is not None:
            out = out + self.bias
        return out


class GatedTemporalConv(nn.Module):
    """Causal 1-D convolution over time with a GLU gate and residual shortcut.

    Left zero padding keeps sequence length fixed and leaks no future steps.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int):
        super().__init__()
        self.kernel = kernel
        self.conv = nn.Conv2d(c_in, 2 * c_out, kernel_size=(1, kernel))
        self.align = nn.Conv2d(c_in, c_out, kernel_size=1) if c_in != c_out else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, C_in, M, T)
        padded = F.pad(x, (self.kernel - 1, 0))
        p, q = self.conv(padded).chunk(2, dim=1)
        res = self.align(x) if self.align is not None else x
        return (p + res) * torch.sigmoid(q)


class STBlock(nn.Module):
    """Gated temporal conv -> Chebyshev graph conv -> gated temporal conv,
    with block residual, layer norm over channels, and dropout."""

    def __init__(self, c_in: int, dim: int, order: int, kernel: int, dropout: float):
        super().__init__()
        self.temporal_in = GatedTemporalConv(c_in, dim, kernel)
        self.graph_conv = ChebGraphConv(dim, dim, order)
        self.temporal_out = GatedTemporalConv(dim, dim, kernel)
        self.align = nn.Conv2d(c_in, dim, kernel_size=1) if c_in != dim else None
        self.norm = nn.LayerNorm(dim)
        self.dropout = SeededDropout(dropout)

    def forward(self, x: torch.Tensor, lt: torch.Tensor) -> torch.Tensor:
        h = self.temporal_in(x)
        hg = h.permute(0, 3, 2, 1)  # (B, T, M, C)
        hg = torch.relu(self.graph_conv(hg, lt))
        h = self.temporal_out(hg.permute(0, 3, 2, 1))
        res = self.align(x) if self.align is not None else x
        h = (h + res).permute(0, 3, 2, 1)
        h = self.norm(h).permute(0, 3, 2, 1)
        return self.dropout(h)


class STBlockEncoder(nn.Module):
    """Stack of ST blocks over [inflow, outflow, inflow-outflow] channels,
    collapsed to the final time step."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        dims = [3] + [config.embed_dim] * config.n_st_blocks
        self.blocks = nn.ModuleList(
            STBlock(dims[i], dims[i + 1], config.chebyshev_order,
                    config.temporal_kernel, config.dropout_rate)
            for i in range(config.n_st_blocks))

    def forward(self, x: torch.Tensor, lt: torch.Tensor) -> torch.Tensor:
        # x: (B, T, M, 2) -> z_T: (B, M, d)
        s, r = x[..., 0], x[..., 1]
        h = torch.stack([s, r, s - r], dim=1)       # (B, 3, T, M)
        h = h.permute(0, 1, 3, 2)                   # (B, 3, M, T)
        for block in self.blocks:
            h = block(h, lt)
        return h[..., -1].permute(0, 2, 1)          # (B, M, d)


class FlowDecoder(nn.Module):
    """Per-node two-layer MLP: Tanh hidden layer, linear head of width 2."""

    def __init__(self, dim: int, dropout: float):
        super().__init__()
        self.hidden = nn.Linear(dim, dim)
        self.dropout = SeededDropout(dropout)
        self.out = nn.Linear(dim, 2)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.out(self.dropout(torch.tanh(self.hidden(z))))


def rk4_integrate(func, z0: torch.Tensor, t_start: float, t_end: float,
                  n_steps: int) -> torch.Tensor:
    """Classic fixed-step 4th-order Runge-Kutta for dz/dt = func(t, z)."""
    if n_steps <= 0:
        return z0
    h = (t_end - t_start) / n_steps
    z, t = z0, t_start
    for _ in range(n_steps):
        k1 = func(t, z)
        k2 = func(t + 0.5 * h, z + 0.5 * h * k1)
        k3 = func(t + 0.5 * h, z + 0.5 * h * k2)
        k4 = func(t + h, z + h * k3)
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t += h
    return z


def euler_integrate(func, z0: torch.Tensor, t_start: float, t_end: float,
                    n_steps: int) -> torch.Tensor:
    """Forward Euler companion of rk4_integrate (testing/reference)."""
    if n_steps <= 0:
        return z0
    h = (t_end - t_start) / n_steps
    z, t = z0, t_start
    for _ in range(n_steps):
        z = z + h * func(t, z)
        t += h
    return z


class PhysicsGuidedNet(nn.Module):
    """Encoder + residual physics step (or RK4 integration) + decoder."""

    def __init__(self, config: ModelConfig, graph_op: GraphOperator,
                 window_length: int | None = None):
        super().__init__()
        if graph_op.chebyshev_order != config.chebyshev_order:
            raise ConfigError("graph operator and model disagree on Chebyshev order")
        if window_length is not None and window_length < config.temporal_kernel:
            raise ConfigError(
                f"window length {window_length} is smaller than the temporal "
                f"kernel {config.temporal_kernel}")
        self.config = config
        self.register_buffer(
            "lt", torch.as_tensor(graph_op.scaled_laplacian, dtype=torch.float32),
            persistent=False)
        self.encoder = STBlockEncoder(config)
        self.flux_in = ChebGraphConv(1, config.embed_dim, config.chebyshev_order, bias=False)
        self.flux_out = ChebGraphConv(1, config.embed_dim, config.chebyshev_order, bias=False)
        self.decoder = FlowDecoder(config.embed_dim, config.dropout_rate)
        self.activation = torch.relu  # test hook; the physics step wraps g once
        self._dropout_rng = torch.Generator()
        for module in self.modules():
            if isinstance(module, SeededDropout):
                module.generator = self._dropout_rng

    # -- dropout control -----------------------------------------------------
    def seed_dropout(self, seed: int):
        self._dropout_rng.manual_seed(int(seed))

    def set_dropout_force(self, active: bool):
        for module in self.modules():
            if isinstance(module, SeededDropout):
                module.force_active = active

    # -- model pieces ----------------------------------------------------------
    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x, self.lt)

    def physics_update(self, z: torch.Tensor, s_last: torch.Tensor,
                       r_last: torch.Tensor) -> torch.Tensor:
        """z + act(g_in(s)) - act(g_out(r)); the discrete residual step."""
        gain = self.activation(self.flux_in(s_last.unsqueeze(-1), self.lt))
        loss = self.activation(self.flux_out(r_last.unsqueeze(-1), self.lt))
        return z + gain - loss

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def _flux_field(self, s_seq: torch.Tensor, r_seq: torch.Tensor):
        """dz/dt with flows held piecewise-constant between recorded steps.

        Time runs over [1, T]; the interval [t, t+1) reads step t (1-indexed).
        """
        t_len = s_seq.shape[1]

        def rhs(t: float, z: torch.Tensor) -> torch.Tensor:
            idx = min(int(np.floor(t + 1e-9)), t_len) - 1
            idx = max(idx, 0)
            return (self.activation(self.flux_in(s_seq[:, idx].unsqueeze(-1), self.lt))
                    - self.activation(self.flux_out(r_seq[:, idx].unsqueeze(-1), self.lt)))

        return rhs

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, T, M, 2) standardized -> prediction (B, M, 2)
        z_t = self.encode(x)
        if self.config.variant == "pn_dis":
            z_next = self.physics_update(z_t, x[:, -1, :, 0], x[:, -1, :, 1])
        else:
            t_len = x.shape[1]
            rhs = self._flux_field(x[..., 0], x[..., 1])
            z_next = rk4_integrate(rhs, z_t, 1.0, float(t_len),
                                   (t_len - 1) * self.config.integrator_steps)
        pred = self.decode(z_next)
        if not torch.isfinite(pred).all():
            raise TrainingError(f"non-finite activation in {self.config.variant} forward pass")
        return pred

    def mc_forward(self, x: torch.Tensor, k_passes: int, seed: int) -> torch.Tensor:
        """K stochastic forward passes with dropout forced active.

        Deterministic given (parameters, seed): pass k draws its masks from an
        independently seeded stream. Returns (K, B, M, 2).
        """
        if k_passes < 2:
            raise ConfigError("mc_forward needs K >= 2 (variance undefined otherwise)")
        was_training = self.training
        self.eval()
        self.set_dropout_force(True)
        try:
            preds = []
            with torch.no_grad():
                for k in range(k_passes):
                    self.seed_dropout(derive_seed(seed, "mc-pass", k))
                    preds.append(self.forward(x))
        finally:
            self.set_dropout_force(False)
            self.train(was_training)
        return torch.stack(preds, dim=0)


def build_model(config: ModelConfig, graph_op: GraphOperator, init_seed: int,
                window_length: int | None = None) -> PhysicsGuidedNet:
    """Construct a network with a deterministic parameter initialization."""
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(init_seed, "init"))
        model = PhysicsGuidedNet(config, graph_op, window_length=window_length)
    return model


def save_checkpoint(path: str | Path, model: PhysicsGuidedNet, metadata: dict | None = None):
    """Versioned container: config, float32 named parameters, phase metadata."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": dataclasses.asdict(model.config),
        "state_dict": {k: v.cpu() for k, v in model.state_dict().items()},
        "rng_state": model._dropout_rng.get_state(),
        "metadata": metadata or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path, graph_op: GraphOperator,
                    window_length: int | None = None) -> tuple[PhysicsGuidedNet, dict]:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    config = ModelConfig(**payload["model_config"])
    with torch.random.fork_rng():
        model = PhysicsGuidedNet(config, graph_op, window_length=window_length)
    model.load_state_dict(payload["state_dict"])
    model._dropout_rng.set_state(payload["rng_state"])
    return model, payload["metadata"]
