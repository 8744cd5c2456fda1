"""Predictor models with a featurizer / linear-classifier split, plus the
gradient-descent training loop shared by every objective."""
from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from .envdata import Environment, FeatureSchema
from .exceptions import ConfigurationError, NumericError, SchemaError

MODEL_FAMILIES = ("mlp", "gru")


class ModelInputs(NamedTuple):
    seq: torch.Tensor         # (B, T, C_cont)
    seq_cat: torch.Tensor     # (B, T, C_cat), int64
    static: torch.Tensor      # (B, S_cont)
    static_cat: torch.Tensor  # (B, S_cat), int64

    def __len__(self):  # type: ignore[override]
        return self.static.shape[0]

    def index(self, idx: torch.Tensor) -> "ModelInputs":
        return ModelInputs(*(t[idx] for t in self))

    def to(self, dtype: torch.dtype) -> "ModelInputs":
        return ModelInputs(self.seq.to(dtype), self.seq_cat, self.static.to(dtype),
                           self.static_cat)


class TensorSet(NamedTuple):
    """Model inputs, float labels (B, L) and the group attribute of one data split."""

    name: str
    inputs: ModelInputs
    y: torch.Tensor
    group: torch.Tensor

    def __len__(self):  # type: ignore[override]
        return self.y.shape[0]

    def index(self, idx: torch.Tensor) -> "TensorSet":
        return TensorSet(self.name, self.inputs.index(idx), self.y[idx], self.group[idx])


def to_tensors(env: Environment, split: str | None = None,
               dtype: torch.dtype = torch.float32) -> TensorSet:
    if split is not None:
        env = env.split(split)
    y = torch.as_tensor(np.array(env.y), dtype=dtype)
    if y.ndim == 1:
        y = y[:, None]
    inputs = ModelInputs(
        torch.as_tensor(np.array(env.seq), dtype=dtype),
        torch.as_tensor(np.array(env.seq_cat), dtype=torch.int64),
        torch.as_tensor(np.array(env.static), dtype=dtype),
        torch.as_tensor(np.array(env.static_cat), dtype=torch.int64),
    )
    return TensorSet(env.name, inputs, y, torch.as_tensor(np.array(env.group)))


def concat_tensor_sets(sets: Sequence[TensorSet], name: str = "pooled") -> TensorSet:
    return TensorSet(
        name,
        ModelInputs(*(torch.cat([s.inputs[i] for s in sets]) for i in range(4))),
        torch.cat([s.y for s in sets]),
        torch.cat([s.group for s in sets]),
    )


@dataclass
class ModelSpec:
    """Architecture of a predictor.

    ``hidden_sizes`` are the MLP featurizer layers (the last one is the
    feature dimension; an empty tuple gives a linear model). The GRU family
    uses ``gru_hidden`` / ``gru_layers`` and reads its features off the final
    hidden state. ``n_labels`` defaults to the schema's label count.
    """

    family: str = "mlp"
    hidden_sizes: tuple[int, ...] = (128, 128)
    gru_hidden: int = 32
    gru_layers: int = 1
    dropout: float = 0.0
    embedding_dim: int = 4
    n_labels: int | None = None
    zero_init_classifier: bool = False

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if self.family not in MODEL_FAMILIES:
            raise ConfigurationError(
                f"unknown model family {self.family!r}; valid: {MODEL_FAMILIES}")
        if any(h <= 0 for h in self.hidden_sizes):
            raise ConfigurationError(f"hidden sizes must be positive, got {self.hidden_sizes}")
        if self.family == "gru" and (self.gru_hidden <= 0 or self.gru_layers <= 0):
            raise ConfigurationError("gru_hidden and gru_layers must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.embedding_dim <= 0:
            raise ConfigurationError("embedding_dim must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d) -> "ModelSpec":
        d = dict(d)
        if "hidden_sizes" in d:
            d["hidden_sizes"] = tuple(d["hidden_sizes"])
        return cls(**d)


class _Embeddings(nn.Module):
    def __init__(self, cardinalities: Sequence[int], dim: int):
        super().__init__()
        self.tables = nn.ModuleList(nn.Embedding(int(c), dim) for c in cardinalities)
        self.out_dim = dim * len(self.tables)

    def forward(self, idx: torch.Tensor) -> torch.Tensor:
        if not len(self.tables):
            return idx.new_zeros((*idx.shape[:-1], 0), dtype=torch.get_default_dtype())
        return torch.cat([t(idx[..., j]) for j, t in enumerate(self.tables)], dim=-1)


class MLPFeaturizer(nn.Module):
    def __init__(self, schema: FeatureSchema, spec: ModelSpec):
        super().__init__()
        self.static_emb = _Embeddings(schema.static_cardinalities, spec.embedding_dim)
        self.seq_emb = _Embeddings(schema.seq_cardinalities, spec.embedding_dim)
        self.input_width = (len(schema.static_continuous) + self.static_emb.out_dim
                            + schema.seq_len * (len(schema.seq_continuous) + self.seq_emb.out_dim))
        if self.input_width == 0:
            raise ConfigurationError("schema has no input channels")
        layers: list[nn.Module] = []
        width = self.input_width
        for h in spec.hidden_sizes:
            layers += [nn.Linear(width, h), nn.ReLU()]
            if spec.dropout > 0:
                layers.append(nn.Dropout(spec.dropout))
            width = h
        self.net = nn.Sequential(*layers)
        self.out_dim = width

    def forward(self, x: ModelInputs) -> torch.Tensor:
        parts = [x.static, self.static_emb(x.static_cat)]
        if x.seq.shape[1]:
            seq = torch.cat([x.seq, self.seq_emb(x.seq_cat)], dim=-1)
            parts.append(seq.flatten(1))
        return self.net(torch.cat(parts, dim=-1))


class GRUFeaturizer(nn.Module):
    """GRU over time steps; static features are appended at every step."""

    def __init__(self, schema: FeatureSchema, spec: ModelSpec):
        super().__init__()
        if schema.seq_len <= 0:
            raise ConfigurationError("the gru family needs time-series inputs (seq_len > 0)")
        self.static_emb = _Embeddings(schema.static_cardinalities, spec.embedding_dim)
        self.seq_emb = _Embeddings(schema.seq_cardinalities, spec.embedding_dim)
        self.input_width = (len(schema.seq_continuous) + self.seq_emb.out_dim
                            + len(schema.static_continuous) + self.static_emb.out_dim)
        self.gru = nn.GRU(self.input_width, spec.gru_hidden, num_layers=spec.gru_layers,
                          batch_first=True,
                          dropout=spec.dropout if spec.gru_layers > 1 else 0.0)
        self.dropout = nn.Dropout(spec.dropout)
        self.out_dim = spec.gru_hidden

    def forward(self, x: ModelInputs) -> torch.Tensor:
        T = x.seq.shape[1]
        static = torch.cat([x.static, self.static_emb(x.static_cat)], dim=-1)
        steps = torch.cat([x.seq, self.seq_emb(x.seq_cat),
                           static[:, None, :].expand(-1, T, -1)], dim=-1)
        _, h = self.gru(steps)
        return self.dropout(h[-1])


class PredictorModel(nn.Module):
    def __init__(self, featurizer: nn.Module, classifier: nn.Linear,
                 schema: FeatureSchema, spec: ModelSpec):
        super().__init__()
        self.featurizer = featurizer
        self.classifier = classifier
        self.schema = schema
        self.spec = spec

    @property
    def n_labels(self) -> int:
        return self.classifier.out_features

    @property
    def feature_dim(self) -> int:
        return self.featurizer.out_dim

    def check_inputs(self, x: ModelInputs) -> None:
        s = self.schema
        expected = {
            "sequence continuous": (x.seq, (s.seq_len, len(s.seq_continuous))),
            "sequence categorical": (x.seq_cat, (s.seq_len, len(s.seq_categorical))),
            "static continuous": (x.static, (len(s.static_continuous),)),
            "static categorical": (x.static_cat, (len(s.static_categorical),)),
        }
        for what, (t, tail) in expected.items():
            if tuple(t.shape[1:]) != tail:
                raise SchemaError(
                    f"{what} channels: got per-example shape {tuple(t.shape[1:])}, expected {tail}")

    def forward(self, x: ModelInputs) -> tuple[torch.Tensor, torch.Tensor]:
        self.check_inputs(x)
        features = self.featurizer(x)
        return features, self.classifier(features)


def build_model(spec: ModelSpec, schema: FeatureSchema, seed: int = 0,
                dtype: torch.dtype = torch.float32) -> PredictorModel:
    n_labels = schema.n_labels if spec.n_labels is None else spec.n_labels
    if n_labels != schema.n_labels:
        raise ConfigurationError(
            f"model spec asks for {n_labels} outputs but the schema has {schema.n_labels} labels")
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        featurizer = (MLPFeaturizer if spec.family == "mlp" else GRUFeaturizer)(schema, spec)
        classifier = nn.Linear(featurizer.out_dim, n_labels)
        if spec.zero_init_classifier:
            nn.init.zeros_(classifier.weight)
            nn.init.zeros_(classifier.bias)
    finally:
        torch.random.set_rng_state(gen_state)
    return PredictorModel(featurizer, classifier, schema, spec).to(dtype)


def forward(model: PredictorModel, inputs: ModelInputs) -> tuple[torch.Tensor, torch.Tensor]:
    """Features (B, d) and logits (B, L)."""
    return model(inputs)


@torch.no_grad()
def predict_logits(model: PredictorModel, inputs: ModelInputs,
                   batch_size: int = 4096) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        out = [model(inputs.index(torch.arange(i, min(i + batch_size, len(inputs)))).to(dtype))[1]
               for i in range(0, len(inputs), batch_size)]
    finally:
        model.train(was_training)
    if not out:
        return np.zeros((0, model.n_labels))
    return torch.cat(out).double().numpy()


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                    np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def predict_proba(model: PredictorModel, inputs: ModelInputs) -> np.ndarray:
    """Per-label probabilities; shape (B,) in binary mode, (B, L) otherwise."""
    p = sigmoid(predict_logits(model, inputs))
    return p[:, 0] if p.shape[1] == 1 else p


def save_checkpoint(model: PredictorModel, path, seeds=None, extra: dict | None = None) -> None:
    torch.save({
        "spec": model.spec.to_dict(),
        "schema": model.schema.to_dict(),
        "state_dict": model.state_dict(),
        "seeds": seeds.to_dict() if seeds is not None else None,
        "extra": extra or {},
    }, path)


def load_checkpoint(path) -> tuple[PredictorModel, dict]:
    blob = torch.load(path, weights_only=False)
    schema = FeatureSchema.from_dict(blob["schema"])
    model = build_model(ModelSpec.from_dict(blob["spec"]), schema)
    dtype = next(iter(blob["state_dict"].values())).dtype
    model = model.to(dtype)
    model.load_state_dict(blob["state_dict"])
    return model, blob


# Training -------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 128


@dataclass
class TrainingTrace:
    steps: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    best_step: int | None = None
    best_score: float | None = None
    status: str = "ok"
    error: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def sample_batches(train_sets: Sequence[TensorSet], batch_size: int,
                   generator: torch.Generator) -> list[TensorSet]:
    """One batch per environment, all of size min(batch_size, smallest env)."""
    b = min(batch_size, min(len(s) for s in train_sets))
    out = []
    for s in train_sets:
        idx = torch.randperm(len(s), generator=generator)[:b]
        out.append(s.index(idx))
    return out


def train_model(model: PredictorModel, train_sets: Sequence[TensorSet], objective,
                optimizer: OptimizerConfig, steps: int, seed: int = 0,
                checkpoint_every: int = 100,
                score_fn: Callable[[PredictorModel], float] | None = None,
                log_every: int = 1) -> tuple[PredictorModel, TrainingTrace]:
    """Adam on ``objective`` with one equal-size batch per environment per step.

    Every ``checkpoint_every`` steps (and after the last one) ``score_fn`` is
    evaluated in eval mode; the best-scoring state is restored at the end.
    A non-finite loss stops training and marks the trace as diverged.
    """
    trace = TrainingTrace()
    if steps <= 0:
        return model, trace
    if len(train_sets) == 0:
        raise ConfigurationError("no training environments")
    gen = torch.Generator().manual_seed(int(seed))
    torch.manual_seed(int(seed))  # dropout masks
    opt = torch.optim.Adam(model.parameters(), lr=optimizer.lr,
                           weight_decay=optimizer.weight_decay)
    best_state = None
    model.train()
    for step in range(steps):
        batches = sample_batches(train_sets, optimizer.batch_size, gen)
        try:
            loss, diag = objective(model, batches, step)
        except NumericError as exc:
            trace.status, trace.error = "diverged", f"step {step}: {exc}"
            break
        if not torch.isfinite(loss):
            trace.status, trace.error = "diverged", f"step {step}: non-finite loss"
            break
        if objective.resets_optimizer(step):
            opt = torch.optim.Adam(model.parameters(), lr=optimizer.lr,
                                   weight_decay=optimizer.weight_decay)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log_every and step % log_every == 0:
            trace.steps.append({"step": step, **diag.to_dict()})
        last = step == steps - 1
        if score_fn is not None and ((step + 1) % checkpoint_every == 0 or last):
            score = float(score_fn(model))
            model.train()
            trace.checkpoints.append({"step": step + 1, "score": score})
            if math.isfinite(score) and (trace.best_score is None or score > trace.best_score):
                trace.best_score, trace.best_step = score, step + 1
                best_state = copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, trace
