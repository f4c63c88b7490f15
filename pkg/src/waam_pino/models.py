"""Surrogate architectures for long-horizon distortion forecasting.

All models map a history window of temperature and distortion frames,
each [N, i, H, W] in normalized units, to ``m`` future distortion frames.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import torch
from torch import Tensor, nn

from .layers import Conv2d, Conv3d, ConvLSTMCell, ConvLSTMState, ShapeError

KINDS = ("cnn", "st_convlstm", "deeponet_rnn", "pideeponet_rnn")

# (beta, lambda) used when a spec leaves them unset
_DEFAULT_WEIGHTS = {
    "cnn": (0.0, 0.0),
    "st_convlstm": (0.0, 0.0),
    "deeponet_rnn": (1.0, 0.0),
    "pideeponet_rnn": (1.0, 0.1),
}


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "pideeponet_rnn"
    window_i: int = 32
    horizon_m: int = 15
    enc_channels: tuple = (16, 32)
    lstm_layers: int = 2
    lstm_hidden: int = 32
    kernel: int = 3
    cnn_width: int = 32
    alpha: float = 1.0
    beta: Optional[float] = None
    lam: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "enc_channels", tuple(int(c) for c in self.enc_channels))
        beta, lam = _DEFAULT_WEIGHTS[self.kind]
        if self.beta is None:
            object.__setattr__(self, "beta", beta)
        if self.lam is None:
            object.__setattr__(self, "lam", lam)
        if self.horizon_m < 1:
            raise ValueError("horizon_m must be >= 1")
        if self.window_i < 4:
            raise ValueError("window_i must be >= 4 (two temporal stride-2 stages)")
        if len(self.enc_channels) != 2:
            raise ValueError("encoder has exactly two conv3d stages")
        if min(self.alpha, self.beta, self.lam) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.kind in ("cnn", "st_convlstm") and (self.beta or self.lam):
            raise ValueError(f"{self.kind} has no trunk: beta and lam must be 0")
        if self.kind == "deeponet_rnn" and self.lam:
            raise ValueError("deeponet_rnn trains without the PDE term (lam = 0)")
        if self.kind != "cnn" and self.enc_channels[-1] != self.lstm_hidden:
            raise ValueError("autoregressive decoding feeds hidden maps back as input: "
                             "enc_channels[-1] must equal lstm_hidden")

    @property
    def has_trunk(self) -> bool:
        return self.kind in ("deeponet_rnn", "pideeponet_rnn")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enc_channels"] = list(self.enc_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{**d, "enc_channels": tuple(d.get("enc_channels", (16, 32)))})


@dataclass
class ModelOutput:
    u_hat: Tensor
    t_hat: Optional[Tensor] = None
    b_feat: Optional[Tensor] = None


def fuse(b_feat: Tensor, t_hat: Tensor) -> Tensor:
    """Field-level Hadamard coupling of branch features and trunk temperature."""
    if b_feat.shape != t_hat.shape:
        raise ShapeError(f"branch {tuple(b_feat.shape)} and trunk {tuple(t_hat.shape)} differ")
    return torch.sigmoid(b_feat * t_hat)


class SpatioTemporalEncoder(nn.Module):
    """Two conv3d stages, each halving the time axis. [N,L,C,H,W] -> [N,L/4,ch,H,W]."""

    def __init__(self, c_in: int, channels, k: int, gen: torch.Generator):
        super().__init__()
        self.conv1 = Conv3d(c_in, channels[0], k, gen, t_stride=2)
        self.conv2 = Conv3d(channels[0], channels[1], k, gen, t_stride=2)

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() != 5:
            raise ShapeError(f"history must be [N, L, C, H, W], got {tuple(x.shape)}")
        if x.shape[1] < 4:
            raise ShapeError(f"history length {x.shape[1]} < 4")
        z = self.conv2(torch.relu(self.conv1(x.transpose(1, 2))))
        return z.transpose(1, 2)


class ConvLSTMForecaster(nn.Module):
    """ConvLSTM stack: read the latent sequence, then decode autoregressively."""

    def __init__(self, c_in: int, hidden: int, layers: int, k: int, gen: torch.Generator):
        super().__init__()
        self.hidden = hidden
        self.cells = nn.ModuleList(
            ConvLSTMCell(c_in if j == 0 else hidden, hidden, k, gen) for j in range(layers))

    def _stack_step(self, x: Tensor, states: list) -> Tensor:
        for j, cell in enumerate(self.cells):
            states[j] = cell(x, states[j])
            x = states[j].h
        return x

    def forward(self, latent: Tensor, m: int) -> Tensor:
        n, length, _, rows, cols = latent.shape
        if length == 0:
            raise ShapeError("empty latent sequence")
        states = [ConvLSTMState.zeros(n, self.hidden, rows, cols, latent)
                  for _ in self.cells]
        for s in range(length):
            self._stack_step(latent[:, s], states)
        x, outs = latent[:, -1], []
        for _ in range(m):
            x = self._stack_step(x, states)
            outs.append(x)
        return torch.stack(outs, dim=1)


class RecurrentStream(nn.Module):
    """Encoder + ConvLSTM + per-step 1x1 head producing one map per future step."""

    def __init__(self, c_in: int, spec: ModelSpec, gen: torch.Generator, activation: bool):
        super().__init__()
        self.encoder = SpatioTemporalEncoder(c_in, spec.enc_channels, spec.kernel, gen)
        self.rnn = ConvLSTMForecaster(spec.enc_channels[-1], spec.lstm_hidden,
                                      spec.lstm_layers, spec.kernel, gen)
        self.head = Conv2d(spec.lstm_hidden, 1, 1, gen)
        self.activation = activation

    def forward(self, x: Tensor, m: int) -> Tensor:
        h = self.rnn(self.encoder(x), m)
        n, m_, ch, rows, cols = h.shape
        y = self.head(h.reshape(n * m_, ch, rows, cols)).reshape(n, m_, rows, cols)
        return torch.sigmoid(y) if self.activation else y


def _as_frames(x: Tensor) -> Tensor:
    """[N, i, H, W] -> [N, i, 1, H, W]."""
    if x.dim() == 4:
        return x.unsqueeze(2)
    if x.dim() == 5 and x.shape[2] == 1:
        return x
    raise ShapeError(f"history must be [N, i, H, W], got {tuple(x.shape)}")


def _check_pair(t_hist: Tensor, u_hist: Tensor):
    if t_hist.shape != u_hist.shape:
        raise ShapeError(f"T history {tuple(t_hist.shape)} != U history {tuple(u_hist.shape)}")


class Surrogate(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec

    def forward(self, t_hist: Tensor, u_hist: Tensor, m: Optional[int] = None) -> ModelOutput:
        raise NotImplementedError


class CNNSurrogate(Surrogate):
    """Early (T, U) fusion, temporal encoder, then one feed-forward shot for all steps."""

    def __init__(self, spec: ModelSpec, gen: torch.Generator):
        super().__init__(spec)
        k, w = spec.kernel, spec.cnn_width
        self.encoder = SpatioTemporalEncoder(2, spec.enc_channels, k, gen)
        latent_len = _latent_length(spec.window_i)
        self.body = nn.ModuleList([
            Conv2d(spec.enc_channels[-1] * latent_len, w, k, gen),
            Conv2d(w, w, k, gen),
            Conv2d(w, w, k, gen),
        ])
        self.head = Conv2d(w, spec.horizon_m, k, gen)

    def cnn_forward(self, t_hist: Tensor, u_hist: Tensor, m: Optional[int] = None) -> Tensor:
        _check_pair(t_hist, u_hist)
        m = self.spec.horizon_m if m is None else m
        if m != self.spec.horizon_m:
            raise ShapeError(f"the CNN head is built for m={self.spec.horizon_m}, asked for {m}")
        x = torch.cat([_as_frames(t_hist), _as_frames(u_hist)], dim=2)
        z = self.encoder(x)
        n, length, ch, rows, cols = z.shape
        h = z.reshape(n, length * ch, rows, cols)
        for conv in self.body:
            h = torch.relu(conv(h))
        return torch.sigmoid(self.head(h))

    def forward(self, t_hist, u_hist, m=None):
        return ModelOutput(self.cnn_forward(t_hist, u_hist, m))


class STConvLSTMSurrogate(Surrogate):
    """Early (T, U) fusion followed by an autoregressive ConvLSTM decoder."""

    def __init__(self, spec: ModelSpec, gen: torch.Generator):
        super().__init__(spec)
        self.stream = RecurrentStream(2, spec, gen, activation=True)

    def st_convlstm_forward(self, t_hist, u_hist, m=None) -> Tensor:
        _check_pair(t_hist, u_hist)
        m = self.spec.horizon_m if m is None else m
        x = torch.cat([_as_frames(t_hist), _as_frames(u_hist)], dim=2)
        return self.stream(x, m)

    def forward(self, t_hist, u_hist, m=None):
        return ModelOutput(self.st_convlstm_forward(t_hist, u_hist, m))


class DeepONetRNN(Surrogate):
    """Decoupled operator model: the trunk reads temperature only, the branch
    reads distortion only, and the two meet in a Hadamard product.

    The same class serves ``deeponet_rnn`` and ``pideeponet_rnn``; they differ
    only in the loss weights used to train them.
    """

    def __init__(self, spec: ModelSpec, gen: torch.Generator):
        super().__init__(spec)
        self.trunk = RecurrentStream(1, spec, gen, activation=True)
        self.branch = RecurrentStream(1, spec, gen, activation=False)

    def trunk_forward(self, t_hist: Tensor, m: Optional[int] = None) -> Tensor:
        return self.trunk(_as_frames(t_hist), self.spec.horizon_m if m is None else m)

    def branch_forward(self, u_hist: Tensor, m: Optional[int] = None) -> Tensor:
        return self.branch(_as_frames(u_hist), self.spec.horizon_m if m is None else m)

    def pideeponet_forward(self, t_hist, u_hist, m=None) -> ModelOutput:
        _check_pair(t_hist, u_hist)
        t_hat = self.trunk_forward(t_hist, m)
        b_feat = self.branch_forward(u_hist, m)
        return ModelOutput(fuse(b_feat, t_hat), t_hat, b_feat)

    def forward(self, t_hist, u_hist, m=None):
        return self.pideeponet_forward(t_hist, u_hist, m)


def _latent_length(length: int) -> int:
    for _ in range(2):
        length = (length - 1) // 2 + 1
    return length


def build_model(spec: ModelSpec, seed: int = 0, dtype: torch.dtype = torch.float32) -> Surrogate:
    gen = torch.Generator().manual_seed(int(seed))
    cls = {"cnn": CNNSurrogate, "st_convlstm": STConvLSTMSurrogate,
           "deeponet_rnn": DeepONetRNN, "pideeponet_rnn": DeepONetRNN}[spec.kind]
    return cls(spec, gen).to(dtype)
