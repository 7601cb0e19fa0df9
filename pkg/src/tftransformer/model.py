"""Three-branch attention classifier over log-Mel segments.

Input x has shape (b, c_in, f, d): f Mel bands by d frames.  Three branches
share it:

* time: two band-reducing convs, channel mean, transpose to (b, d, f/4),
  self-attention over frames -> q_hat
* frequency: two frame-reducing convs, channel mean (b, f, d/4),
  self-attention over bands -> k_hat
* fusion: two 5x5 convs, channel mean -> v (b, f/4, d/4); q and k are linear
  maps of q_hat and k_hat; cross-attention with the residual on v -> y

The classifier pools y to per-frame mean and std over the band axis
(b, d/2), applies one fully connected layer and a softmax.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .nncore import functional as F
from .nncore.layers import (
    AttentionSpec,
    BatchNorm2d,
    Conv2d,
    ConvSpec,
    EncoderLayer,
    Linear,
    Module,
)
from .nncore.tensor import ShapeError, Tensor, concat, no_grad

IEMOCAP_LABELS = ("angry", "happy", "neutral", "sad")
CASIA_LABELS = ("angry", "fear", "happy", "neutral", "sad", "surprise")

ABLATIONS = {
    "T+F": (True, True, False),
    "T+TF": (True, False, True),
    "F+TF": (False, True, True),
    "T+F+TF": (True, True, True),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EmotionLabel:
    index: int
    name: str


class LabelSet:
    """Fixed bijection between class names and indices for one corpus."""

    def __init__(self, names: Sequence[str]):
        names = tuple(names)
        if len(set(names)) != len(names) or not names:
            raise ConfigError(f"label names must be unique and non-empty: {names}")
        self.names = names
        self._index = {n: i for i, n in enumerate(names)}

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, index: int) -> EmotionLabel:
        return EmotionLabel(index, self.names[index])

    def lookup(self, key: str | int) -> EmotionLabel:
        if isinstance(key, str) and key in self._index:
            return EmotionLabel(self._index[key], key)
        try:
            i = int(key)
        except (TypeError, ValueError):
            raise ValueError(f"unknown label {key!r}; expected one of {self.names}") from None
        if not 0 <= i < len(self.names):
            raise ValueError(f"label index {i} out of range for {len(self.names)} classes")
        return EmotionLabel(i, self.names[i])


def _time_conv(c: int) -> ConvSpec:
    return ConvSpec(c, (5, 1), (2, 1), (2, 0))


def _freq_conv(c: int) -> ConvSpec:
    return ConvSpec(c, (1, 5), (1, 2), (0, 2))


def _fusion_conv(c: int) -> ConvSpec:
    return ConvSpec(c, (5, 5), (2, 2), (2, 2))


@dataclass(frozen=True)
class ModelConfig:
    f: int = 80
    d: int = 80
    c_in: int = 1
    c1: int = 64
    conv_time: ConvSpec = field(default_factory=lambda: _time_conv(64))
    conv_freq: ConvSpec = field(default_factory=lambda: _freq_conv(64))
    conv_fusion: ConvSpec = field(default_factory=lambda: _fusion_conv(64))
    attn_time: AttentionSpec = field(default_factory=lambda: AttentionSpec(20, 2, 512))
    attn_freq: AttentionSpec = field(default_factory=lambda: AttentionSpec(20, 2, 512))
    attn_fusion: AttentionSpec = field(default_factory=lambda: AttentionSpec(20, 4, 1024))
    n_classes: int = 4
    use_time: bool = True
    use_freq: bool = True
    use_fusion: bool = True
    n_layers: int = 1
    positional_encoding: bool = False
    dropout: float = 0.0
    bn_momentum: float = 0.1

    @classmethod
    def build(
        cls,
        f: int = 80,
        d: int = 80,
        c1: int = 64,
        ff_dim: int | None = None,
        fusion_ff_dim: int | None = None,
        **kwargs,
    ) -> "ModelConfig":
        """Config for an (f, d) input with the reference conv/attention layout.

        Embedding sizes follow the input (f/4 for the time encoder, d/4 for
        the others); ``ff_dim`` / ``fusion_ff_dim`` default to 512 / 1024.
        """
        ff = 512 if ff_dim is None else ff_dim
        fff = 1024 if fusion_ff_dim is None else fusion_ff_dim
        heads = kwargs.pop("heads", (2, 2, 4))
        return cls(
            f=f,
            d=d,
            c1=c1,
            conv_time=_time_conv(c1),
            conv_freq=_freq_conv(c1),
            conv_fusion=_fusion_conv(c1),
            attn_time=AttentionSpec(f // 4, heads[0], ff),
            attn_freq=AttentionSpec(d // 4, heads[1], ff),
            attn_fusion=AttentionSpec(d // 4, heads[2], fff),
            **kwargs,
        )

    def with_ablation(self, name: str) -> "ModelConfig":
        try:
            t, fr, tf = ABLATIONS[name]
        except KeyError:
            raise ConfigError(f"unknown ablation {name!r}; expected one of {list(ABLATIONS)}") from None
        return dataclasses.replace(self, use_time=t, use_freq=fr, use_fusion=tf)

    @property
    def ablation_name(self) -> str:
        for name, toggles in ABLATIONS.items():
            if toggles == (self.use_time, self.use_freq, self.use_fusion):
                return name
        return "invalid"

    def validate(self) -> None:
        if self.f % 4 or self.d % 4:
            raise ConfigError(f"f={self.f} and d={self.d} must be divisible by 4")
        if self.ablation_name == "invalid":
            raise ConfigError(
                "branch toggles must be one of T+F, T+TF, F+TF, T+F+TF "
                f"(got time={self.use_time}, freq={self.use_freq}, fusion={self.use_fusion})"
            )
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        f4, d4 = self.f // 4, self.d // 4
        checks = [
            ("conv_time", self.conv_time, (f4, self.d)),
            ("conv_freq", self.conv_freq, (self.f, d4)),
            ("conv_fusion", self.conv_fusion, (f4, d4)),
        ]
        for name, spec, want in checks:
            if spec.out_channels != self.c1:
                raise ConfigError(f"{name} has {spec.out_channels} output channels, c1={self.c1}")
            h, w = spec.output_shape(*spec.output_shape(self.f, self.d))
            if (h, w) != want:
                raise ConfigError(f"{name} maps ({self.f}, {self.d}) to ({h}, {w}), need {want}")
        if self.attn_time.embed_dim != f4:
            raise ConfigError(f"time encoder embed_dim must be f/4 = {f4}")
        if self.attn_freq.embed_dim != d4 or self.attn_fusion.embed_dim != d4:
            raise ConfigError(f"frequency and fusion encoder embed_dim must be d/4 = {d4}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        for key in ("conv_time", "conv_freq", "conv_fusion"):
            if key in data and isinstance(data[key], dict):
                spec = data[key]
                data[key] = ConvSpec(
                    spec["out_channels"], tuple(spec["kernel"]), tuple(spec["stride"]), tuple(spec["padding"])
                )
        for key in ("attn_time", "attn_freq", "attn_fusion"):
            if key in data and isinstance(data[key], dict):
                data[key] = AttentionSpec(**data[key])
        return cls(**data)


@dataclass
class ForwardTrace:
    x_hat_time: np.ndarray | None = None  # (b, c1, f/4, d)
    s_time: np.ndarray | None = None  # (b, d, f/4)
    m: np.ndarray | None = None
    q_hat: np.ndarray | None = None  # (b, d, f/4)
    x_hat_freq: np.ndarray | None = None  # (b, c1, f, d/4)
    s_freq: np.ndarray | None = None  # (b, f, d/4)
    n: np.ndarray | None = None
    k_hat: np.ndarray | None = None  # (b, f, d/4)
    x_hat: np.ndarray | None = None  # (b, c1, f/4, d/4)
    v: np.ndarray | None = None
    q: np.ndarray | None = None
    k: np.ndarray | None = None
    p: np.ndarray | None = None
    y: np.ndarray | None = None  # (b, f/4, d/4)
    pooled: np.ndarray | None = None  # (b, d/2)
    logits: np.ndarray | None = None
    probs: np.ndarray | None = None
    attention: dict[str, list[np.ndarray]] = field(default_factory=dict)


class ConvStack(Module):
    """conv -> BN -> ReLU, twice, with the same conv spec."""

    def __init__(self, c_in: int, spec: ConvSpec, rng, dtype, momentum: float):
        self.conv1 = Conv2d(c_in, spec, rng, dtype)
        self.bn1 = BatchNorm2d(spec.out_channels, momentum, dtype=dtype)
        self.conv2 = Conv2d(spec.out_channels, spec, rng, dtype)
        self.bn2 = BatchNorm2d(spec.out_channels, momentum, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


class TimeFrequencyTransformer(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        f4, d4 = cfg.f // 4, cfg.d // 4
        mom = cfg.bn_momentum

        def encoder(spec: AttentionSpec) -> list[EncoderLayer]:
            return [EncoderLayer(spec, rng, dtype, cfg.dropout) for _ in range(cfg.n_layers)]

        if cfg.use_time:
            self.time_convs = ConvStack(cfg.c_in, cfg.conv_time, rng, dtype, mom)
            self.time_encoder = encoder(cfg.attn_time)
        if cfg.use_freq:
            self.freq_convs = ConvStack(cfg.c_in, cfg.conv_freq, rng, dtype, mom)
            self.freq_encoder = encoder(cfg.attn_freq)
        if cfg.use_fusion:
            self.fusion_convs = ConvStack(cfg.c_in, cfg.conv_fusion, rng, dtype, mom)
            # a missing branch is replaced by a learned map of v
            self.q_proj = Linear(cfg.d, d4, rng, dtype) if cfg.use_time else Linear(d4, d4, rng, dtype)
            self.k_proj = Linear(cfg.f, f4, rng, dtype) if cfg.use_freq else Linear(d4, d4, rng, dtype)
            self.fusion_encoder = encoder(cfg.attn_fusion)
            self.classifier = Linear(cfg.d // 2, cfg.n_classes, rng, dtype)
        else:
            self.classifier = Linear(f4 + d4, cfg.n_classes, rng, dtype)

    # ------------------------------------------------------------------

    def set_rng(self, rng: np.random.Generator | None) -> None:
        """Generator used by dropout (only consulted when dropout > 0)."""
        for m in self.modules():
            if isinstance(m, EncoderLayer):
                m.rng = rng

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.trainable_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise ShapeError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(self.dtype, copy=True)

    # ------------------------------------------------------------------

    def _encode(self, layers, seq: Tensor, trace_key: str, trace: ForwardTrace) -> tuple[Tensor, Tensor]:
        """Run self-attention layers; returns the output and the first layer's hidden state."""
        if self.cfg.positional_encoding:
            seq = seq + Tensor(F.sinusoidal_positions(seq.shape[1], seq.shape[2], self.dtype))
        maps = []
        first = None
        for layer in layers:
            seq, hidden, attn = layer(seq)
            maps.append(attn)
            if first is None:
                first = hidden
        trace.attention[trace_key] = maps
        return seq, first

    def _check_input(self, x: Tensor) -> None:
        want = (self.cfg.c_in, self.cfg.f, self.cfg.d)
        if x.ndim != 4 or x.shape[1:] != want:
            raise ShapeError(f"expected input (b, {want[0]}, {want[1]}, {want[2]}), got {x.shape}")

    def time_branch(self, x: Tensor, trace: ForwardTrace) -> Tensor:
        x_hat = self.time_convs(x)
        s = F.channel_mean(x_hat).swapaxes(1, 2)
        trace.x_hat_time, trace.s_time = x_hat.data, s.data
        q_hat, m = self._encode(self.time_encoder, s, "time", trace)
        trace.m, trace.q_hat = m.data, q_hat.data
        return q_hat

    def freq_branch(self, x: Tensor, trace: ForwardTrace) -> Tensor:
        x_hat = self.freq_convs(x)
        s = F.channel_mean(x_hat)
        trace.x_hat_freq, trace.s_freq = x_hat.data, s.data
        k_hat, n = self._encode(self.freq_encoder, s, "freq", trace)
        trace.n, trace.k_hat = n.data, k_hat.data
        return k_hat

    def project_qk(self, q_hat: Tensor | None, k_hat: Tensor | None, v: Tensor) -> tuple[Tensor, Tensor]:
        """Map q_hat (b, d, f/4) and k_hat (b, f, d/4) to (b, f/4, d/4)."""
        q = self.q_proj(q_hat.swapaxes(1, 2)) if q_hat is not None else self.q_proj(v)
        k = self.k_proj(k_hat.swapaxes(1, 2)).swapaxes(1, 2) if k_hat is not None else self.k_proj(v)
        return q, k

    def fusion_forward(self, x: Tensor, q_hat: Tensor | None, k_hat: Tensor | None, trace: ForwardTrace) -> Tensor:
        x_hat = self.fusion_convs(x)
        v = F.channel_mean(x_hat)
        q, k = self.project_qk(q_hat, k_hat, v)
        trace.x_hat, trace.v, trace.q, trace.k = x_hat.data, v.data, q.data, k.data
        maps = []
        y = v
        for i, layer in enumerate(self.fusion_encoder):
            y, p, attn = layer(q, k, y)
            maps.append(attn)
            if i == 0:
                trace.p = p.data
        trace.attention["fusion"] = maps
        trace.y = y.data
        return y

    def classify(self, pooled: Tensor, trace: ForwardTrace) -> tuple[Tensor, Tensor]:
        logits = self.classifier(pooled)
        probs = F.softmax(logits)
        trace.pooled, trace.logits, trace.probs = pooled.data, logits.data, probs.data
        return logits, probs

    def forward(self, x: Tensor) -> tuple[Tensor, ForwardTrace]:
        """Returns class probabilities (b, n_classes) and the trace."""
        self._check_input(x)
        trace = ForwardTrace()
        q_hat = self.time_branch(x, trace) if self.cfg.use_time else None
        k_hat = self.freq_branch(x, trace) if self.cfg.use_freq else None
        if self.cfg.use_fusion:
            y = self.fusion_forward(x, q_hat, k_hat, trace)
            pooled = F.mean_std_pool(y)
        else:
            pooled = concat([q_hat.mean(axis=1), k_hat.mean(axis=1)], axis=-1)
        _, probs = self.classify(pooled, trace)
        return probs, trace

    def predict_proba(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Eval-mode class probabilities for an (n, c_in, f, d) array."""
        was_training = self.training
        self.eval()
        try:
            out = []
            with no_grad():
                for i in range(0, len(x), batch_size):
                    probs, _ = self.forward(Tensor(np.asarray(x[i : i + batch_size], dtype=self.dtype)))
                    out.append(probs.data)
        finally:
            self.train(was_training)
        return np.concatenate(out, axis=0)
