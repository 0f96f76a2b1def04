"""Wav2Vec2-style dimensional emotion regressor with freeze plans and LoRA.

Layout: strided conv front-end with GELU, linear feature projection, grouped
positional convolution (GELU, residual, layer norm), post-norm transformer
blocks, mean pooling over all frames, dropout and one linear head per task.
"""

from __future__ import annotations

import dataclasses
import math
import zlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

TASKS = ("activation", "valence")


class ConfigError(ValueError):
    pass


class ModelInputError(ValueError):
    pass


class ModelStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    fe_channels: tuple[int, ...] = (32,) * 7
    fe_kernels: tuple[int, ...] = (10, 3, 3, 3, 3, 2, 2)
    fe_strides: tuple[int, ...] = (5, 2, 2, 2, 2, 2, 2)
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ffn: int = 256
    pos_kernel: int = 16
    pos_groups: int = 4
    head_dropout: float = 0.2
    internal_dropout: float = 0.1
    n_tasks: int = 2
    frozen_dropout: bool = False

    def __post_init__(self):
        for name in ("fe_channels", "fe_kernels", "fe_strides"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        bad = []
        if not (len(self.fe_channels) == len(self.fe_kernels) == len(self.fe_strides) >= 1):
            bad.append("fe_channels/fe_kernels/fe_strides (equal length >= 1)")
        for name in ("d_model", "n_layers", "n_heads", "d_ffn", "pos_kernel", "pos_groups"):
            if getattr(self, name) < 1:
                bad.append(f"{name} (must be >= 1)")
        if self.n_heads >= 1 and self.d_model % self.n_heads:
            bad.append("n_heads (must divide d_model)")
        if self.pos_groups >= 1 and self.d_model % self.pos_groups:
            bad.append("pos_groups (must divide d_model)")
        for name in ("head_dropout", "internal_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                bad.append(f"{name} (must lie in [0, 1))")
        if self.n_tasks != len(TASKS):
            bad.append(f"n_tasks (must be {len(TASKS)})")
        if bad:
            raise ConfigError("invalid model config: " + ", ".join(bad))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config field(s): {', '.join(sorted(unknown))}")
        return cls(**data)

    def min_audio_length(self) -> int:
        length = 1
        for k, s in zip(reversed(self.fe_kernels), reversed(self.fe_strides)):
            length = (length - 1) * s + k
        return length

    def n_frames(self, samples: int) -> int:
        if samples < self.min_audio_length():
            raise ModelInputError(f"{samples} samples is shorter than the front-end minimum {self.min_audio_length()}")
        for k, s in zip(self.fe_kernels, self.fe_strides):
            samples = T.conv_output_length(samples, k, s)
        return samples


BASE_EQUIVALENT = ModelConfig(
    fe_channels=(512,) * 7,
    d_model=768,
    n_layers=12,
    n_heads=12,
    d_ffn=3072,
    pos_kernel=128,
    pos_groups=16,
)
DESK = ModelConfig()
DESK_DEEP = dataclasses.replace(DESK, n_layers=12)

PRESETS = {"base-equivalent": BASE_EQUIVALENT, "desk": DESK, "desk-deep": DESK_DEEP}


@dataclass(frozen=True)
class FreezePlan:
    mode: str = "full"
    n: int = 0

    MODES = ("full", "partial", "lora", "caching_partial")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise ConfigError(f"freeze mode must be one of {self.MODES}, got {self.mode!r}")
        if self.mode in ("partial", "caching_partial") and self.n < 1:
            raise ConfigError(f"freeze n must be >= 1 for {self.mode}, got {self.n}")

    @classmethod
    def parse(cls, name: str) -> "FreezePlan":
        """Accepts ``full``, ``lora``, ``partialN`` and ``cacheN``."""
        if name in ("full", "lora"):
            return cls(name)
        for prefix, mode in (("partial", "partial"), ("cache", "caching_partial")):
            if name.startswith(prefix) and name[len(prefix) :].isdigit():
                return cls(mode, int(name[len(prefix) :]))
        raise ConfigError(f"unrecognised freeze plan {name!r}")

    @property
    def label(self) -> str:
        if self.mode == "partial":
            return f"partial{self.n}"
        if self.mode == "caching_partial":
            return f"cache{self.n}"
        return self.mode

    def split_layer(self, n_layers: int) -> int:
        """Index of the first trainable transformer block."""
        if self.mode in ("partial", "caching_partial"):
            return n_layers - self.n
        return 0


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.1
    targets: tuple[str, ...] = ("q", "v")

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"lora rank must be >= 1, got {self.rank}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"lora dropout must lie in [0, 1), got {self.dropout}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


def group_of(path: str) -> str:
    """Freezing group of a parameter path: frontend, positional, layer.<i>, lora, head."""
    if path.startswith("fe."):
        return "frontend"
    if path.startswith("pos."):
        return "positional"
    if path.startswith("head."):
        return "head"
    if path.startswith("encoder.layer."):
        if ".lora_" in path:
            return "lora"
        return "layer." + path.split(".")[2]
    raise KeyError(path)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered map of every base parameter path to its shape."""
    shapes: dict[str, tuple[int, ...]] = {}
    c_prev = 1
    for i, (c, k) in enumerate(zip(config.fe_channels, config.fe_kernels)):
        shapes[f"fe.conv.{i}.weight"] = (c, c_prev, k)
        c_prev = c
    d, f = config.d_model, config.d_ffn
    shapes["fe.proj.weight"] = (d, c_prev)
    shapes["fe.proj.bias"] = (d,)
    shapes["pos.conv.weight"] = (d, d // config.pos_groups, config.pos_kernel)
    shapes["pos.conv.bias"] = (d,)
    shapes["pos.norm.weight"] = (d,)
    shapes["pos.norm.bias"] = (d,)
    for i in range(config.n_layers):
        p = f"encoder.layer.{i}."
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"attn.{proj}.weight"] = (d, d)
            shapes[p + f"attn.{proj}.bias"] = (d,)
        shapes[p + "norm1.weight"] = (d,)
        shapes[p + "norm1.bias"] = (d,)
        shapes[p + "ffn.in.weight"] = (f, d)
        shapes[p + "ffn.in.bias"] = (f,)
        shapes[p + "ffn.out.weight"] = (d, f)
        shapes[p + "ffn.out.bias"] = (d,)
        shapes[p + "norm2.weight"] = (d,)
        shapes[p + "norm2.bias"] = (d,)
    for task in TASKS:
        shapes[f"head.{task}.weight"] = (1, d)
        shapes[f"head.{task}.bias"] = (1,)
    return shapes


def lora_shapes(config: ModelConfig, lora: LoraConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    d = config.d_model
    for i in range(config.n_layers):
        for proj in lora.targets:
            shapes[f"encoder.layer.{i}.attn.{proj}.lora_a"] = (lora.rank, d)
            shapes[f"encoder.layer.{i}.attn.{proj}.lora_b"] = (d, lora.rank)
    return shapes


def init_parameter(path: str, shape: tuple[int, ...], seed: int, dtype=np.float32) -> np.ndarray:
    """Deterministic init keyed by (seed, path).

    Matrices draw U(-b, b) with b = sqrt(6 / fan_in); biases, norm shifts and
    LoRA B start at zero, norm scales at one.
    """
    leaf = path.rsplit(".", 1)[-1]
    if leaf == "lora_b" or (leaf == "bias" and len(shape) == 1):
        return np.zeros(shape, dtype=dtype)
    if ".norm" in path and leaf == "weight":
        return np.ones(shape, dtype=dtype)
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    rng = T.make_rng(seed, zlib.crc32(path.encode()))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ForwardOutput(NamedTuple):
    predictions: Tensor
    hidden_states: list[Tensor]


class Model:
    """Parameters keyed by stable dotted paths plus per-path trainable flags."""

    def __init__(self, config: ModelConfig, seed: int, dtype=np.float32, materialize: bool = True):
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.shapes: dict[str, tuple[int, ...]] = parameter_shapes(config)
        self.params: dict[str, Tensor] = {}
        self.lora: LoraConfig | None = None
        self.plan = FreezePlan("full")
        self.trainable: dict[str, bool] = {}
        self.block_calls: Counter = Counter()
        if materialize:
            for path, shape in self.shapes.items():
                self.params[path] = Tensor(init_parameter(path, shape, seed, self.dtype))
        apply_freeze_plan(self, self.plan)

    @property
    def materialized(self) -> bool:
        return bool(self.params)

    def paths(self) -> list[str]:
        return list(self.shapes)

    def trainable_paths(self) -> list[str]:
        return [p for p in self.shapes if self.trainable[p]]

    def frozen_paths(self) -> list[str]:
        return [p for p in self.shapes if not self.trainable[p]]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p: t.data for p, t in self.params.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for path, arr in arrays.items():
            if path not in self.shapes:
                raise ModelStateError(f"unknown parameter {path!r}")
            if tuple(arr.shape) != self.shapes[path]:
                raise ModelStateError(f"shape mismatch for {path}: {arr.shape} vs {self.shapes[path]}")
            self.params[path].data = np.array(arr, dtype=self.dtype)

    def layer_trainable(self, index: int) -> bool:
        return any(self.trainable[p] for p in self.shapes if p.startswith(f"encoder.layer.{index}."))

    def positional_trainable(self) -> bool:
        return self.trainable["pos.conv.weight"]

    # forward pieces

    def _w(self, weights: Mapping[str, Tensor] | None, path: str) -> Tensor:
        return (weights or self.params)[path]

    def _check_audio(self, samples: int) -> None:
        minimum = self.config.min_audio_length()
        if samples < minimum:
            raise ModelInputError(f"audio has {samples} samples; the front-end needs at least {minimum}")

    def frontend(self, audio: Tensor, weights=None) -> Tensor:
        """[B, samples] -> [B, frames, d_model]."""
        self._check_audio(audio.shape[-1])
        x = T.reshape(audio, (audio.shape[0], 1, audio.shape[1]))
        for i, stride in enumerate(self.config.fe_strides):
            x = T.gelu(T.conv1d(x, self._w(weights, f"fe.conv.{i}.weight"), stride=stride))
        x = T.swapaxes(x, 1, 2)
        return T.linear(x, self._w(weights, "fe.proj.weight"), self._w(weights, "fe.proj.bias"))

    def positional(self, x: Tensor, train: bool = False, rng=None, weights=None) -> Tensor:
        frames = x.shape[1]
        k = self.config.pos_kernel
        conv = T.conv1d(
            T.swapaxes(x, 1, 2),
            self._w(weights, "pos.conv.weight"),
            self._w(weights, "pos.conv.bias"),
            groups=self.config.pos_groups,
            padding=k // 2,
        )
        if conv.shape[2] != frames:
            conv = conv[:, :, :frames]
        h = x + T.swapaxes(T.gelu(conv), 1, 2)
        h = T.layer_norm(h, self._w(weights, "pos.norm.weight"), self._w(weights, "pos.norm.bias"))
        return T.dropout(h, self.config.internal_dropout, train and self._drop_active(self.positional_trainable()), rng)

    def _drop_active(self, trainable: bool) -> bool:
        return trainable or self.config.frozen_dropout

    def _projection(self, h: Tensor, prefix: str, weights, train: bool, rng) -> Tensor:
        out = T.linear(h, self._w(weights, prefix + ".weight"), self._w(weights, prefix + ".bias"))
        a_path = prefix + ".lora_a"
        if self.lora is not None and a_path in self.shapes:
            x = T.dropout(h, self.lora.dropout, train, rng)
            delta = T.linear(T.linear(x, self._w(weights, a_path)), self._w(weights, prefix + ".lora_b"))
            out = out + delta * self.lora.scaling
        return out

    def block(self, h: Tensor, index: int, train: bool = False, rng=None, weights=None) -> Tensor:
        self.block_calls[index] += 1
        cfg = self.config
        p = f"encoder.layer.{index}."
        drop = train and self._drop_active(self.layer_trainable(index))
        batch, frames, d = h.shape
        heads, dh = cfg.n_heads, d // cfg.n_heads

        def split(t: Tensor) -> Tensor:
            return T.transpose(T.reshape(t, (batch, frames, heads, dh)), (0, 2, 1, 3))

        q = split(self._projection(h, p + "attn.q", weights, drop, rng))
        k = split(self._projection(h, p + "attn.k", weights, drop, rng))
        v = split(self._projection(h, p + "attn.v", weights, drop, rng))
        scores = T.matmul(q, T.swapaxes(k, 2, 3)) * (1.0 / math.sqrt(dh))
        ctx = T.matmul(T.softmax(scores), v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (batch, frames, d))
        attn = T.linear(ctx, self._w(weights, p + "attn.o.weight"), self._w(weights, p + "attn.o.bias"))
        h = T.layer_norm(
            h + T.dropout(attn, cfg.internal_dropout, drop, rng),
            self._w(weights, p + "norm1.weight"),
            self._w(weights, p + "norm1.bias"),
        )
        ff = T.gelu(T.linear(h, self._w(weights, p + "ffn.in.weight"), self._w(weights, p + "ffn.in.bias")))
        ff = T.linear(ff, self._w(weights, p + "ffn.out.weight"), self._w(weights, p + "ffn.out.bias"))
        return T.layer_norm(
            h + T.dropout(ff, cfg.internal_dropout, drop, rng),
            self._w(weights, p + "norm2.weight"),
            self._w(weights, p + "norm2.bias"),
        )

    def heads(self, hidden: Tensor, train: bool = False, rng=None, weights=None) -> Tensor:
        pooled = T.dropout(T.mean_over_time(hidden), self.config.head_dropout, train, rng)
        outs = [
            T.linear(pooled, self._w(weights, f"head.{task}.weight"), self._w(weights, f"head.{task}.bias"))
            for task in TASKS
        ]
        return T.concat(outs, axis=-1)

    def forward_from(
        self, hidden: Tensor, start_layer: int, train: bool = False, rng=None, weights=None
    ) -> ForwardOutput:
        """Run blocks ``start_layer..n_layers-1`` and the heads on ``[B, frames, d]``."""
        states = []
        for i in range(start_layer, self.config.n_layers):
            hidden = self.block(hidden, i, train, rng, weights)
            states.append(hidden)
        return ForwardOutput(self.heads(hidden, train, rng, weights), states)

    def forward(self, audio: Tensor, train: bool = False, rng=None, weights=None) -> ForwardOutput:
        """Predictions ``[B, 2]`` (activation, valence) and every hidden state.

        ``hidden_states[0]`` is the positional-block output; entry ``i + 1`` is the
        output of block ``i``.
        """
        if not self.materialized:
            raise ModelStateError("model parameters were not materialized")
        if audio.ndim != 2:
            raise ModelInputError(f"audio batch must be [B, samples], got {audio.shape}")
        hidden = self.positional(self.frontend(audio, weights), train, rng, weights)
        out = self.forward_from(hidden, 0, train, rng, weights)
        return ForwardOutput(out.predictions, [hidden, *out.hidden_states])

    __call__ = forward

    def forward_prefix(self, sample: Tensor, upto_layer: int) -> Tensor:
        """Eval-mode representation entering block ``upto_layer`` for one sample: ``[frames, d]``."""
        if not 0 <= upto_layer <= self.config.n_layers:
            raise ValueError(f"upto_layer must lie in [0, {self.config.n_layers}], got {upto_layer}")
        if sample.ndim == 1:
            sample = Tensor(sample.data[None])
        if sample.shape[0] != 1:
            raise ModelInputError(f"forward_prefix takes a single sample, got batch of {sample.shape[0]}")
        with T.no_grad():
            hidden = self.positional(self.frontend(sample))
            for i in range(upto_layer):
                hidden = self.block(hidden, i)
        return Tensor(hidden.data[0])


def build_model(config: ModelConfig, seed: int, dtype=np.float32, materialize: bool = True) -> Model:
    config.validate()
    return Model(config, seed, dtype=dtype, materialize=materialize)


def apply_freeze_plan(model: Model, plan: FreezePlan) -> Model:
    cfg = model.config
    if plan.mode in ("partial", "caching_partial") and plan.n > cfg.n_layers:
        raise ValueError(f"cannot finetune {plan.n} layers of a {cfg.n_layers}-layer model")
    if plan.mode == "lora" and model.lora is None:
        raise ModelStateError("lora freeze plan needs adapters; call attach_lora first")
    split = plan.split_layer(cfg.n_layers)
    for path in model.shapes:
        group = group_of(path)
        if group == "frontend":
            flag = False
        elif group == "head":
            flag = True
        elif group == "lora":
            flag = plan.mode == "lora"
        elif plan.mode == "lora":
            flag = False
        elif group == "positional":
            flag = plan.mode in ("full", "partial")
        else:
            flag = int(group.split(".")[1]) >= split
        model.trainable[path] = flag
        if path in model.params:
            model.params[path].requires_grad = flag
    model.plan = plan
    return model


def attach_lora(model: Model, cfg: LoraConfig | None = None, seed: int | None = None) -> Model:
    """Add rank-``r`` adapters to the configured projections and switch to the LoRA plan."""
    if model.lora is not None:
        raise ModelStateError("LoRA adapters are already attached")
    cfg = cfg or LoraConfig()
    seed = model.seed if seed is None else seed
    model.lora = cfg
    for path, shape in lora_shapes(model.config, cfg).items():
        model.shapes[path] = shape
        if model.materialized:
            model.params[path] = Tensor(init_parameter(path, shape, seed, model.dtype))
    return apply_freeze_plan(model, FreezePlan("lora"))


def count_trainable_params(model: Model) -> int:
    return sum(int(np.prod(model.shapes[p])) for p in model.trainable_paths())


def closed_form_counts(config: ModelConfig, lora: LoraConfig | None = None) -> dict[str, int]:
    """Per-component parameter counts from formulas, independent of enumeration."""
    d, f, k, g = config.d_model, config.d_ffn, config.pos_kernel, config.pos_groups
    per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
    positional = d * (d // g) * k + d + 2 * d
    heads = config.n_tasks * (d + 1)
    lora = lora or LoraConfig()
    adapters = config.n_layers * len(lora.targets) * (2 * lora.rank * d)
    return {"layer": per_layer, "positional": positional, "heads": heads, "lora": adapters}


def expected_trainable(config: ModelConfig, plan: FreezePlan, lora: LoraConfig | None = None) -> int:
    c = closed_form_counts(config, lora)
    if plan.mode == "full":
        return config.n_layers * c["layer"] + c["positional"] + c["heads"]
    if plan.mode == "partial":
        return plan.n * c["layer"] + c["positional"] + c["heads"]
    if plan.mode == "caching_partial":
        return plan.n * c["layer"] + c["heads"]
    return c["lora"] + c["heads"]


def plan_model(config: ModelConfig, plan: FreezePlan, seed: int = 0, materialize: bool = True,
               lora: LoraConfig | None = None, dtype=np.float32) -> Model:
    """Build a model and put it under ``plan`` (attaching adapters for LoRA)."""
    model = build_model(config, seed, dtype=dtype, materialize=materialize)
    if plan.mode == "lora":
        return attach_lora(model, lora)
    return apply_freeze_plan(model, plan)


def format_count(n: int) -> str:
    """Table-style rounding: whole millions, then hundreds of thousands, then tenths of a thousand."""
    if n >= 1_000_000:
        return f"{round(n / 1e6)}M"
    if n >= 100_000:
        return f"{round(n / 1e5) * 100}K"
    return f"{n / 1e3:.1f}K"
