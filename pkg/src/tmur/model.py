"""TMUR network: aligned views, private + collaborative experts, unified router."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from tmur import engine as E
from tmur.engine import Parameter, ShapeError, Tensor
from tmur.evidential import batch_opinions

ROUTER_INPUTS = ("context", "local")
MODEL_FORMAT = "tmur-model/1"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``router_input="local"`` replaces the router context with per-view
    total evidence (detached), i.e. a branch-local self-weighting rule.
    """

    view_dims: tuple[int, ...]
    num_classes: int
    aligned_dim: int = 64
    expert_hidden_dims: tuple[int, ...] = (256,)
    routing_temperature: float = 1.0
    attention: bool = True
    router_input: str = "context"
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "view_dims", tuple(int(d) for d in self.view_dims))
        object.__setattr__(self, "expert_hidden_dims", tuple(int(d) for d in self.expert_hidden_dims))
        if len(self.view_dims) < 1:
            raise ValueError("need at least one view")
        dims = (*self.view_dims, self.aligned_dim, *self.expert_hidden_dims)
        if any(d < 1 for d in dims):
            raise ValueError(f"all dimensions must be >= 1, got {dims}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if not self.routing_temperature > 0:
            raise ValueError("routing temperature must be positive")
        if self.router_input not in ROUTER_INPUTS:
            raise ValueError(f"router_input must be one of {ROUTER_INPUTS}")

    @property
    def num_views(self) -> int:
        return len(self.view_dims)

    @property
    def num_experts(self) -> int:
        return self.num_views + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["view_dims"] = list(self.view_dims)
        d["expert_hidden_dims"] = list(self.expert_hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ForwardOutput:
    aligned: list[Tensor]
    context: Tensor
    evidence: list[Tensor]
    zhat: list[Tensor]
    pi: Tensor
    fused: Tensor

    @property
    def fused_alpha(self) -> Tensor:
        return E.add(self.fused, 1.0)

    def expert_alphas(self) -> list[Tensor]:
        return [E.add(e, 1.0) for e in self.evidence]


@dataclass
class Standardizer:
    """Per-view feature standardisation fitted on the training split."""

    means: list[np.ndarray] = field(default_factory=list)
    stds: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def fit(cls, views: Sequence[np.ndarray]) -> "Standardizer":
        means, stds = [], []
        for x in views:
            m = x.mean(axis=0)
            s = x.std(axis=0)
            means.append(m)
            stds.append(np.where(s > 1e-12, s, 1.0))
        return cls(means, stds)

    def transform(self, views: Sequence[np.ndarray]) -> list[np.ndarray]:
        if len(views) != len(self.means):
            raise ShapeError(f"standardizer fitted on {len(self.means)} views, got {len(views)}")
        return [(x - m) / s for x, m, s in zip(views, self.means, self.stds)]


def _mlp_shapes(prefix: str, widths: Sequence[int]) -> list[tuple[str, tuple[int, int]]]:
    shapes = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        shapes.append((f"{prefix}.layer{i}.weight", (a, b)))
        shapes.append((f"{prefix}.layer{i}.bias", (1, b)))
    return shapes


class TMURModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.standardizer: Standardizer | None = None
        self.meta: dict = {}
        self.params: dict[str, Parameter] = {}
        for name, shape in self.parameter_shapes(config):
            self.params[name] = Parameter(self._init_value(name, shape, seed), name)

    # ------------------------------------------------------------ construction

    @staticmethod
    def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, int]]]:
        d, k, v_count = config.aligned_dim, config.num_classes, config.num_views
        hidden = list(config.expert_hidden_dims)
        shapes: list[tuple[str, tuple[int, int]]] = []
        for v, dv in enumerate(config.view_dims):
            shapes += [
                (f"projectors.{v}.weight", (dv, d)),
                (f"projectors.{v}.bias", (1, d)),
                (f"projectors.{v}.ln.gain", (1, d)),
                (f"projectors.{v}.ln.shift", (1, d)),
            ]
        for i in range(config.num_experts):
            width_in = d if i < v_count else v_count * d
            shapes += _mlp_shapes(f"experts.{i}", [width_in, *hidden, d])
        for i in range(config.num_experts):
            shapes += [(f"heads.{i}.weight", (d, k)), (f"heads.{i}.bias", (1, k))]
        if config.attention and config.router_input == "context":
            shapes += [(f"attention.{m}", (d, d)) for m in ("query", "key", "value", "output")]
        router_in = v_count * d if config.router_input == "context" else v_count
        shapes += _mlp_shapes("router", [router_in, *hidden, config.num_experts])
        return shapes

    @staticmethod
    def _init_value(name: str, shape: tuple[int, int], seed: int) -> np.ndarray:
        if name.endswith(".ln.gain"):
            return np.ones(shape)
        if name.endswith("bias") or name.endswith(".ln.shift"):
            return np.zeros(shape)
        return E.glorot_uniform(shape, seed, name)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # ------------------------------------------------------------ building blocks

    def _mlp(self, prefix: str, x: Tensor) -> Tensor:
        n_layers = len(self.config.expert_hidden_dims) + 1
        for i in range(1, n_layers + 1):
            x = E.linear(x, self.params[f"{prefix}.layer{i}.weight"], self.params[f"{prefix}.layer{i}.bias"])
            if i < n_layers:
                x = E.softplus(x)
        return x

    def _check_views(self, views: Sequence) -> list[Tensor]:
        if len(views) != self.config.num_views:
            raise ShapeError(f"expected {self.config.num_views} views, got {len(views)}")
        out = []
        rows = None
        for v, (x, dv) in enumerate(zip(views, self.config.view_dims)):
            t = x if isinstance(x, Tensor) else Tensor(x)
            if t.shape[1] != dv:
                raise ShapeError(f"view {v} has width {t.shape[1]}, expected {dv}")
            if rows is not None and t.shape[0] != rows:
                raise ShapeError("all views must have the same number of rows")
            rows = t.shape[0]
            out.append(t)
        return out

    def align_views(self, views: Sequence) -> list[Tensor]:
        xs = self._check_views(views)
        eps = self.config.layer_norm_eps
        p = self.params
        return [
            E.layer_norm(
                E.linear(x, p[f"projectors.{v}.weight"], p[f"projectors.{v}.bias"]),
                p[f"projectors.{v}.ln.gain"],
                p[f"projectors.{v}.ln.shift"],
                eps,
            )
            for v, x in enumerate(xs)
        ]

    def expert_forward(self, aligned: list[Tensor]) -> tuple[list[Tensor], list[Tensor], list[Tensor]]:
        """Returns ``(hidden z, evidence e, normalised private hidden zhat)``."""
        v_count = self.config.num_views
        z = [self._mlp(f"experts.{v}", h) for v, h in enumerate(aligned)]
        z.append(self._mlp(f"experts.{v_count}", E.concat(aligned)))
        evidence = [
            E.softplus(E.linear(zi, self.params[f"heads.{i}.weight"], self.params[f"heads.{i}.bias"]))
            for i, zi in enumerate(z)
        ]
        zhat = [E.l2_normalize_rows(zv) for zv in z[:v_count]]
        return z, evidence, zhat

    def attention_params(self) -> E.AttentionParams:
        p = self.params
        return E.AttentionParams(p["attention.query"], p["attention.key"], p["attention.value"], p["attention.output"])

    def router_context(self, aligned: list[Tensor], evidence: list[Tensor] | None = None) -> Tensor:
        cfg = self.config
        if cfg.router_input == "local":
            if evidence is None:
                raise ValueError("local routing needs the expert evidence")
            stats = [np.log1p(e.data.sum(axis=1, keepdims=True)) for e in evidence[: cfg.num_views]]
            return Tensor(np.concatenate(stats, axis=1))
        if not cfg.attention:
            return E.concat(aligned)
        proj = self.attention_params()
        return E.concat([E.cross_attention(h, aligned, aligned, proj) for h in aligned])

    def route(self, context: Tensor) -> Tensor:
        return E.softmax(self._mlp("router", context), self.config.routing_temperature)

    def router_logits(self, context: Tensor) -> Tensor:
        return self._mlp("router", context)

    @staticmethod
    def fuse(pi: Tensor, evidence: Sequence[Tensor]) -> Tensor:
        if pi.shape[1] != len(evidence):
            raise ShapeError(f"{pi.shape[1]} routing weights for {len(evidence)} experts")
        fused = None
        for i, e in enumerate(evidence):
            term = E.mul(E.take_slice(pi, i), e)
            fused = term if fused is None else E.add(fused, term)
        return fused

    def forward(self, views: Sequence) -> ForwardOutput:
        aligned = self.align_views(views)
        _, evidence, zhat = self.expert_forward(aligned)
        context = self.router_context(aligned, evidence)
        pi = self.route(context)
        return ForwardOutput(aligned, context, evidence, zhat, pi, self.fuse(pi, evidence))

    def predict(self, views: Sequence) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(labels, probabilities, uncertainty)`` from the fused opinion.

        Ties in the argmax resolve to the lowest class index.
        """
        out = self.forward(views)
        _, u, p = batch_opinions(out.fused.data)
        return np.argmax(p, axis=1), p, u

    # ------------------------------------------------------------ persistence

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    def dumps(self) -> str:
        head = {"format": MODEL_FORMAT, "seed": self.seed, "config": self.config.to_dict(), "meta": self.meta}
        lines = ["{", f'"header": {json.dumps(head, sort_keys=True)},']
        if self.standardizer is not None:
            std = self.standardizer
            lines.append('"standardizer": {')
            lines.append(f'"means": [{", ".join(_vector_text(m) for m in std.means)}],')
            lines.append(f'"stds": [{", ".join(_vector_text(s) for s in std.stds)}]')
            lines.append("},")
        lines.append('"parameters": {')
        entries = []
        for name, p in self.params.items():
            entries.append(f'"{name}": {{"shape": [{p.shape[0]}, {p.shape[1]}], "values": {_vector_text(p.data.ravel())}}}')
        lines.append(",\n".join(entries))
        lines.append("}")
        lines.append("}")
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, path) -> "TMURModel":
        return cls.loads(Path(path).read_text())

    @classmethod
    def loads(cls, text: str) -> "TMURModel":
        doc = json.loads(text)
        head = doc["header"]
        if head.get("format") != MODEL_FORMAT:
            raise ValueError(f"unsupported model format {head.get('format')!r}")
        model = cls(ModelConfig.from_dict(head["config"]), seed=head["seed"])
        model.meta = dict(head.get("meta", {}))
        for name, entry in doc["parameters"].items():
            if name not in model.params:
                raise ValueError(f"unexpected parameter {name!r} in model file")
            shape = tuple(entry["shape"])
            if shape != model.params[name].shape:
                raise ShapeError(f"{name}: stored shape {shape} != {model.params[name].shape}")
            model.params[name].data = np.array(entry["values"], dtype=np.float64).reshape(shape)
        missing = set(model.params) - set(doc["parameters"])
        if missing:
            raise ValueError(f"model file lacks parameters {sorted(missing)}")
        if "standardizer" in doc:
            s = doc["standardizer"]
            model.standardizer = Standardizer(
                [np.array(m, dtype=np.float64) for m in s["means"]],
                [np.array(v, dtype=np.float64) for v in s["stds"]],
            )
        return model


def _vector_text(values: np.ndarray) -> str:
    return "[" + ", ".join(format(float(x), ".17g") for x in np.ravel(values)) + "]"
