"""Genotype/environment encoders, the two-tower interaction model and staged training.

Everything is float64 numpy with hand-written backpropagation, so inference
is deterministic and gradients can be checked against finite differences.
Hidden layer: affine -> layer norm -> activation -> dropout.
"""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from gxe.data import DataError, Dataset, write_csv
from gxe.mixed_model import LabelSets

log = logging.getLogger(__name__)

EMBED_DIM = 8
LN_EPS = 1e-5
CHECKPOINT_VERSION = 1
KINK = 1e-3


class TrainingError(ArithmeticError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    hidden: tuple[tuple[int, str], ...]  # (width, "relu" | "sigmoid")
    layer_norm: bool = True
    dropout: float = 0.5
    output: str = "scalar"  # or "embedding": final hidden activations are the output

    def validate(self) -> None:
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        for w, act in self.hidden:
            if w < 1:
                raise ValueError("layer widths must be >= 1")
            if act not in ("relu", "sigmoid"):
                raise ValueError(f"unknown activation {act!r}")
        if self.output not in ("scalar", "embedding"):
            raise ValueError(f"unknown output {self.output!r}")
        if self.output == "embedding" and not self.hidden:
            raise ValueError("an embedding model needs at least one hidden layer")

    @property
    def out_dim(self) -> int:
        return 1 if self.output == "scalar" else self.hidden[-1][0]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# ---------------------------------------------------------------- encoder


class EncoderModel:
    """MLP with layer norm and dropout after each hidden layer."""

    def __init__(self, spec: MLPSpec, params: dict[str, np.ndarray]):
        spec.validate()
        self.spec = spec
        self.params = params

    @classmethod
    def init(cls, spec: MLPSpec, seed: int = 0) -> "EncoderModel":
        """Fan-in scaled uniform initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        spec.validate()
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        fan_in = spec.input_dim
        for l, (w, _) in enumerate(spec.hidden):
            bound = 1.0 / math.sqrt(fan_in)
            params[f"W{l}"] = rng.uniform(-bound, bound, size=(fan_in, w))
            params[f"b{l}"] = rng.uniform(-bound, bound, size=w)
            if spec.layer_norm:
                params[f"g{l}"] = np.ones(w)
                params[f"s{l}"] = np.zeros(w)
            fan_in = w
        if spec.output == "scalar":
            bound = 1.0 / math.sqrt(fan_in)
            params["W_out"] = rng.uniform(-bound, bound, size=(fan_in, 1))
            params["b_out"] = rng.uniform(-bound, bound, size=1)
        return cls(spec, params)

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.spec, {k: v.copy() for k, v in self.params.items()})

    def without_output(self) -> "EncoderModel":
        """Same hidden stack with the output layer dropped; output is the last hidden activation."""
        params = {k: v.copy() for k, v in self.params.items() if k not in ("W_out", "b_out")}
        return EncoderModel(replace(self.spec, output="embedding"), params)

    def _check_input(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.spec.input_dim:
            raise DataError(f"feature length {X.shape[1]} does not match model input {self.spec.input_dim}")
        return X

    def forward(self, X, train: bool = False, rng: np.random.Generator | None = None):
        X = self._check_input(X)
        p = self.params
        cache = {"X": X, "layers": []}
        a = X
        drop = self.spec.dropout if train else 0.0
        for l, (_, act) in enumerate(self.spec.hidden):
            z = a @ p[f"W{l}"] + p[f"b{l}"]
            layer = {"in": a}
            if self.spec.layer_norm:
                mu = z.mean(axis=1, keepdims=True)
                inv = 1.0 / np.sqrt(z.var(axis=1, keepdims=True) + LN_EPS)
                zh = (z - mu) * inv
                layer["zh"], layer["inv"] = zh, inv
                z = zh * p[f"g{l}"] + p[f"s{l}"]
            layer["pre"] = z
            a = np.maximum(z, 0.0) if act == "relu" else _sigmoid(z)
            layer["act"] = a
            if drop > 0.0:
                mask = (rng.random(a.shape) >= drop) / (1.0 - drop)
                layer["mask"] = mask
                a = a * mask
            cache["layers"].append(layer)
        cache["h"] = a
        if self.spec.output == "scalar":
            out = (a @ p["W_out"])[:, 0] + p["b_out"][0]
        else:
            out = a
        return out, cache

    def backward(self, cache, dout) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Gradients of sum(dout * out) w.r.t. parameters and inputs."""
        p = self.params
        grads: dict[str, np.ndarray] = {}
        if self.spec.output == "scalar":
            dout = np.asarray(dout, dtype=np.float64).reshape(-1)
            grads["W_out"] = cache["h"].T @ dout[:, None]
            grads["b_out"] = np.array([dout.sum()])
            da = dout[:, None] * p["W_out"][:, 0][None, :]
        else:
            da = np.asarray(dout, dtype=np.float64)
        for l in range(len(self.spec.hidden) - 1, -1, -1):
            layer = cache["layers"][l]
            act = self.spec.hidden[l][1]
            if "mask" in layer:
                da = da * layer["mask"]
            if act == "relu":
                dz = da * (layer["pre"] > 0.0)
            else:
                s = layer["act"]
                dz = da * s * (1.0 - s)
            if self.spec.layer_norm:
                zh, inv = layer["zh"], layer["inv"]
                grads[f"g{l}"] = (dz * zh).sum(axis=0)
                grads[f"s{l}"] = dz.sum(axis=0)
                dzh = dz * p[f"g{l}"]
                dz = inv * (dzh - dzh.mean(axis=1, keepdims=True) - zh * (dzh * zh).mean(axis=1, keepdims=True))
            grads[f"W{l}"] = layer["in"].T @ dz
            grads[f"b{l}"] = dz.sum(axis=0)
            da = dz @ p[f"W{l}"].T
        return grads, da

    def __call__(self, X) -> np.ndarray:
        return self.forward(X)[0]

    def named_parameters(self) -> dict[str, np.ndarray]:
        return self.params

    def relu_preactivations(self, X) -> list[np.ndarray]:
        _, cache = self.forward(X)
        return [layer["pre"] for layer, (_, act) in zip(cache["layers"], self.spec.hidden) if act == "relu"]


def _hidden_stack(width: int, n_layers: int) -> tuple[tuple[int, str], ...]:
    """n_layers hidden layers of ``width``; the last one at half width with sigmoid."""
    if n_layers < 1 or width < 2:
        raise ValueError("need at least one hidden layer of width >= 2")
    layers = [(width, "relu")] * (n_layers - 1) + [(max(width // 2, 1), "sigmoid")]
    return tuple(layers)


def build_genotype_encoder(d_g: int, width: int = 256, n_layers: int = 2, dropout: float = 0.5, seed: int = 0) -> EncoderModel:
    return EncoderModel.init(MLPSpec(d_g, _hidden_stack(width, n_layers), True, dropout), seed)


def build_env_encoder(d_e: int, width: int = 48, n_layers: int = 3, dropout: float = 0.5, seed: int = 0) -> EncoderModel:
    return EncoderModel.init(MLPSpec(d_e, _hidden_stack(width, n_layers), True, dropout), seed)


# ---------------------------------------------------------------- two-tower


class TwoTowerModel:
    """f_ge(x_g, x_e) = <proj_g(tower_g(x_g)), proj_e(tower_e(x_e))>."""

    def __init__(self, g_tower: EncoderModel, e_tower: EncoderModel, proj: dict[str, np.ndarray]):
        if g_tower.spec.output != "embedding" or e_tower.spec.output != "embedding":
            raise ValueError("towers must output embeddings")
        if proj["Pg"].shape[1] != proj["Pe"].shape[1]:
            raise ValueError("projection lengths differ")
        self.g_tower = g_tower
        self.e_tower = e_tower
        self.proj = proj

    @classmethod
    def from_encoders(cls, f_g: EncoderModel, f_e: EncoderModel, embed_dim: int = EMBED_DIM, seed: int = 0):
        """Towers copied from trained encoders (output layers dropped) plus fresh projections."""
        g, e = f_g.without_output(), f_e.without_output()
        rng = np.random.default_rng(seed)
        proj = {}
        for name, tower in (("g", g), ("e", e)):
            fan_in = tower.spec.out_dim
            bound = 1.0 / math.sqrt(fan_in)
            proj[f"P{name}"] = rng.uniform(-bound, bound, size=(fan_in, embed_dim))
            proj[f"c{name}"] = rng.uniform(-bound, bound, size=embed_dim)
        return cls(g, e, proj)

    @property
    def embed_dim(self) -> int:
        return self.proj["Pg"].shape[1]

    def copy(self) -> "TwoTowerModel":
        return TwoTowerModel(self.g_tower.copy(), self.e_tower.copy(), {k: v.copy() for k, v in self.proj.items()})

    def embeddings(self, Xg, Xe, train=False, rng=None):
        hg, cg = self.g_tower.forward(Xg, train, rng)
        he, ce = self.e_tower.forward(Xe, train, rng)
        if hg.shape[0] != he.shape[0]:
            raise DataError("genotype and environment batches differ in length")
        u = hg @ self.proj["Pg"] + self.proj["cg"]
        v = he @ self.proj["Pe"] + self.proj["ce"]
        return u, v, (cg, ce, hg, he)

    def forward(self, Xg, Xe, train: bool = False, rng: np.random.Generator | None = None):
        u, v, caches = self.embeddings(Xg, Xe, train, rng)
        return np.einsum("nk,nk->n", u, v), (u, v, caches)

    def backward(self, cache, dout) -> dict[str, np.ndarray]:
        u, v, (cg, ce, hg, he) = cache
        dout = np.asarray(dout, dtype=np.float64)[:, None]
        du, dv = dout * v, dout * u
        grads = {
            "proj.Pg": hg.T @ du,
            "proj.cg": du.sum(axis=0),
            "proj.Pe": he.T @ dv,
            "proj.ce": dv.sum(axis=0),
        }
        gg, _ = self.g_tower.backward(cg, du @ self.proj["Pg"].T)
        ge, _ = self.e_tower.backward(ce, dv @ self.proj["Pe"].T)
        grads.update({f"g.{k}": x for k, x in gg.items()})
        grads.update({f"e.{k}": x for k, x in ge.items()})
        return grads

    def __call__(self, Xg, Xe) -> np.ndarray:
        return self.forward(Xg, Xe)[0]

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = {f"proj.{k}": x for k, x in self.proj.items()}
        out.update({f"g.{k}": x for k, x in self.g_tower.params.items()})
        out.update({f"e.{k}": x for k, x in self.e_tower.params.items()})
        return out

    def relu_preactivations(self, Xg, Xe) -> list[np.ndarray]:
        return self.g_tower.relu_preactivations(Xg) + self.e_tower.relu_preactivations(Xe)


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 250
    batch_size: int = 256
    learning_rate: float = 1e-3
    weight_decay: float = 3e-4
    seed: int = 0
    optimizer: str = "adamw"  # "gd": full-batch gradient descent without dropout (debug)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if self.optimizer not in ("adamw", "gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


class AdamW:
    """Adam with decoupled weight decay (decay applied to every parameter)."""

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p *= 1.0 - c.learning_rate * c.weight_decay
            p -= c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


class _GD:
    def __init__(self, params, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg

    def step(self, grads):
        for k, p in self.params.items():
            p -= self.cfg.learning_rate * (grads[k] + self.cfg.weight_decay * p)


def _mse(pred, y) -> float:
    return float(np.mean((pred - y) ** 2))


def _train(model, inputs: tuple, y: np.ndarray, cfg: TrainConfig, validation, what: str):
    """Shared loop for encoders (inputs=(X,)) and two-tower models (inputs=(Xg, Xe))."""
    cfg.validate()
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if n == 0:
        raise DataError(f"no training samples for {what}")
    rng = np.random.default_rng(cfg.seed)
    params = model.named_parameters()
    debug = cfg.optimizer == "gd"
    opt = _GD(params, cfg) if debug else AdamW(params, cfg)
    batch = n if debug else cfg.batch_size

    def predict(ins):
        return model.forward(*ins)[0]

    trace = []
    for epoch in range(1, cfg.epochs + 1):
        order = np.arange(n) if debug else rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            out, cache = model.forward(*(x[idx] for x in inputs), train=not debug, rng=rng)
            resid = out - y[idx]
            with np.errstate(over="ignore", invalid="ignore"):
                loss = float(np.mean(resid**2))
            if not math.isfinite(loss):
                raise TrainingError(
                    f"{what}: non-finite loss at epoch {epoch} (lr={cfg.learning_rate}); "
                    "the learning rate is probably too large"
                )
            grads = model.backward(cache, 2.0 * resid / len(idx))
            if isinstance(grads, tuple):
                grads = grads[0]
            opt.step(grads)
        train_mse = _mse(predict(inputs), y)
        if not math.isfinite(train_mse):
            raise TrainingError(f"{what}: non-finite loss at epoch {epoch} (lr={cfg.learning_rate})")
        val_mse = float("nan")
        if validation is not None:
            *vin, vy = validation
            val_mse = _mse(predict(tuple(vin)), np.asarray(vy, dtype=np.float64))
        trace.append((epoch, train_mse, val_mse))
    return model, trace


def train_component(m: EncoderModel, inputs, targets, cfg: TrainConfig, validation=None):
    """Minimize MSE of ``m`` on (inputs, targets); returns a trained copy and the loss trace.

    ``validation`` is an optional (inputs, targets) pair. The trace holds
    (epoch, train_mse, val_mse) with train MSE evaluated without dropout.
    """
    model = m.copy()
    X = model._check_input(inputs)
    val = None if validation is None else (model._check_input(validation[0]), validation[1])
    return _train(model, (X,), targets, cfg, val, "encoder")


def train_two_tower(m: TwoTowerModel, xg, xe, targets, cfg: TrainConfig, validation=None):
    model = m.copy()
    return _train(model, (np.asarray(xg, float), np.asarray(xe, float)), targets, cfg, validation, "two-tower")


# ---------------------------------------------------------------- structured fit


@dataclass(frozen=True)
class Architecture:
    g_width: int = 256
    g_layers: int = 2
    e_width: int = 48
    e_layers: int = 3
    dropout: float = 0.5
    embed_dim: int = EMBED_DIM


@dataclass(frozen=True)
class StageConfigs:
    arch: Architecture = Architecture()
    g: TrainConfig = TrainConfig(250, 256, 1e-3, 3e-4)
    e: TrainConfig = TrainConfig(500, 32, 1e-3, 1e-5)
    ge: TrainConfig = TrainConfig(250, 256, 1e-2, 3e-4)

    def with_seed(self, seed: int) -> "StageConfigs":
        return replace(
            self,
            g=replace(self.g, seed=seed * 3 + 1),
            e=replace(self.e, seed=seed * 3 + 2),
            ge=replace(self.ge, seed=seed * 3 + 3),
        )


FULL = StageConfigs()
DESK = StageConfigs(
    Architecture(64, 2, 12, 3),
    TrainConfig(125, 256, 1e-3, 3e-4),
    TrainConfig(250, 32, 1e-3, 1e-5),
    TrainConfig(125, 256, 1e-2, 3e-4),
)
PROFILES = {"full": FULL, "desk": DESK}


@dataclass
class Models:
    f_g: EncoderModel
    f_e: EncoderModel
    f_ge: TwoTowerModel
    mu_hat: float
    traces: dict[str, list] = field(default_factory=dict)


def genotype_features(d: Dataset, ids: Sequence[str]) -> np.ndarray:
    return d.genotypes.rows(ids)


def environment_features(d: Dataset, ids: Sequence[str]) -> np.ndarray:
    e = d.environments
    if e.env_vector is None:
        raise DataError("environment vectors not built; call build_env_vectors first")
    idx = e.index
    try:
        return e.env_vector[[idx[k] for k in ids]]
    except KeyError as exc:
        raise DataError(f"environment {exc.args[0]!r} has no feature vector") from None


def observed_cells(d: Dataset, labels: LabelSets) -> tuple[np.ndarray, np.ndarray]:
    gpos = {g: i for i, g in enumerate(labels.genotype_ids)}
    epos = {e: j for j, e in enumerate(labels.environment_ids)}
    cells = sorted({(gpos[g], epos[e]) for g, e in zip(d.genotype_id, d.environment_id) if g in gpos and e in epos})
    if not cells:
        raise DataError("no observed cells overlap the label sets")
    gi, ej = (np.array(c, dtype=np.intp) for c in zip(*cells))
    return gi, ej


def structured_fit(d: Dataset, labels: LabelSets, cfgs: StageConfigs = DESK, seed: int = 0) -> Models:
    """Stage 1: f_g on y_g and f_e on y_e. Stage 2: two-tower f_ge on observed y_ge cells."""
    cfgs = cfgs.with_seed(seed)
    a = cfgs.arch
    Xg = genotype_features(d, labels.genotype_ids)
    Xe = environment_features(d, labels.environment_ids)
    f_g = build_genotype_encoder(Xg.shape[1], a.g_width, a.g_layers, a.dropout, seed=cfgs.g.seed)
    f_e = build_env_encoder(Xe.shape[1], a.e_width, a.e_layers, a.dropout, seed=cfgs.e.seed)
    f_g, tr_g = train_component(f_g, Xg, labels.y_g, cfgs.g)
    f_e, tr_e = train_component(f_e, Xe, labels.y_e, cfgs.e)
    gi, ej = observed_cells(d, labels)
    y_ge = labels.y_ge[gi, ej]
    if np.isnan(y_ge).any():
        raise DataError("y_ge labels missing for observed cells")
    tt = TwoTowerModel.from_encoders(f_g, f_e, a.embed_dim, seed=cfgs.ge.seed)
    f_ge, tr_ge = train_two_tower(tt, Xg[gi], Xe[ej], y_ge, cfgs.ge)
    return Models(f_g, f_e, f_ge, labels.mu_hat, {"f_g": tr_g, "f_e": tr_e, "f_ge": tr_ge})


def predict_yield(models: Models, mu_hat: float, xg, xe, interaction: bool = True):
    """mu_hat + f_g(x_g) + f_e(x_e) + f_ge(x_g, x_e); dropout off. Scalar in, scalar out."""
    scalar = np.ndim(xg) == 1 and np.ndim(xe) == 1
    xg = models.f_g._check_input(xg)
    xe = models.f_e._check_input(xe)
    if xg.shape[0] != xe.shape[0]:
        raise DataError("genotype and environment feature batches differ in length")
    out = mu_hat + models.f_g(xg) + models.f_e(xe)
    if interaction:
        out = out + models.f_ge(xg, xe)
    return float(out[0]) if scalar else out


# ---------------------------------------------------------------- gradient check


def _loss_and_grads(m, sample):
    *xs, y = sample
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    out, cache = m.forward(*xs)
    resid = out - y
    grads = m.backward(cache, 2.0 * resid / len(y))
    if isinstance(grads, tuple):
        grads = grads[0]
    return float(np.mean(resid**2)), grads


def _loss(m, sample) -> float:
    *xs, y = sample
    return float(np.mean((m.forward(*xs)[0] - np.asarray(y, dtype=np.float64).reshape(-1)) ** 2))


def has_kink(m, sample) -> bool:
    pre = m.relu_preactivations(*sample[:-1])
    return any((np.abs(z) < KINK).any() for z in pre)


def draw_check_points(m, n: int, seed: int = 0, max_tries: int = 1000) -> list[tuple]:
    """Random single-sample (inputs..., target) points with no ReLU pre-activation near 0."""
    rng = np.random.default_rng(seed)
    dims = [m.spec.input_dim] if isinstance(m, EncoderModel) else [m.g_tower.spec.input_dim, m.e_tower.spec.input_dim]
    points = []
    for _ in range(max_tries):
        s = tuple(rng.normal(size=(1, k)) for k in dims) + (rng.normal(size=1),)
        if not has_kink(m, s):
            points.append(s)
            if len(points) == n:
                return points
    raise ValueError("could not draw points away from ReLU kinks")


def gradient_check(m, sample, epsilon: float = 1e-5, max_coords: int | None = None, seed: int = 0) -> float:
    """Relative error between analytic and central-difference gradients of the MSE.

    Error is ||a - n|| / max(||a|| + ||n||, 1e-300) over all parameter
    coordinates (or a random subset of ``max_coords``). Raises if ``sample``
    sits within 1e-3 of a ReLU kink.
    """
    if has_kink(m, sample):
        raise ValueError("sample is too close to a ReLU kink")
    _, grads = _loss_and_grads(m, sample)
    params = m.named_parameters()
    coords = [(k, i) for k, p in params.items() for i in range(p.size)]
    if max_coords is not None and max_coords < len(coords):
        rng = np.random.default_rng(seed)
        coords = [coords[i] for i in np.sort(rng.choice(len(coords), max_coords, replace=False))]
    analytic = np.array([grads[k].flat[i] for k, i in coords])
    numeric = np.empty(len(coords))
    for c, (k, i) in enumerate(coords):
        p = params[k]
        old = p.flat[i]
        p.flat[i] = old + epsilon
        fp = _loss(m, sample)
        p.flat[i] = old - epsilon
        fm = _loss(m, sample)
        p.flat[i] = old
        numeric[c] = (fp - fm) / (2.0 * epsilon)
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-300)
    return float(np.linalg.norm(analytic - numeric) / denom)


# ---------------------------------------------------------------- checkpoints and traces


def _pack(prefix: str, model, header: dict, arrays: dict) -> None:
    if isinstance(model, EncoderModel):
        header[prefix] = {"kind": "encoder", "spec": asdict(model.spec)}
        arrays.update({f"{prefix}/{k}": v for k, v in model.params.items()})
    else:
        header[prefix] = {"kind": "two_tower"}
        _pack(f"{prefix}.g", model.g_tower, header, arrays)
        _pack(f"{prefix}.e", model.e_tower, header, arrays)
        arrays.update({f"{prefix}/proj.{k}": v for k, v in model.proj.items()})


def _unpack(prefix: str, header: dict, arrays) -> EncoderModel | TwoTowerModel:
    entry = header[prefix]
    if entry["kind"] == "encoder":
        s = entry["spec"]
        spec = MLPSpec(s["input_dim"], tuple((int(w), a) for w, a in s["hidden"]), s["layer_norm"], s["dropout"], s["output"])
        keys = [k for k in arrays if k.startswith(prefix + "/")]
        return EncoderModel(spec, {k.split("/", 1)[1]: np.array(arrays[k]) for k in keys})
    g = _unpack(f"{prefix}.g", header, arrays)
    e = _unpack(f"{prefix}.e", header, arrays)
    proj = {k.split("/proj.", 1)[1]: np.array(arrays[k]) for k in arrays if k.startswith(prefix + "/proj.")}
    return TwoTowerModel(g, e, proj)


def save_models(path, models: Models) -> Path:
    """Versioned checkpoint: an .npz archive whose ``header`` entry is JSON."""
    header = {"format": "gxe-models", "version": CHECKPOINT_VERSION, "mu_hat": models.mu_hat}
    arrays: dict[str, np.ndarray] = {}
    for name in ("f_g", "f_e", "f_ge"):
        _pack(name, getattr(models, name), header, arrays)
    buf = io.BytesIO()
    np.savez(buf, header=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    path = Path(path)
    path.write_bytes(buf.getvalue())
    return path


def load_models(path) -> Models:
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        if header.get("format") != "gxe-models":
            raise DataError(f"{path}: not a model checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {header.get('version')}")
        arrays = {k: z[k] for k in z.files if k != "header"}
    return Models(*(_unpack(n, header, arrays) for n in ("f_g", "f_e", "f_ge")), float(header["mu_hat"]))


def write_trace(path, trace) -> Path:
    return write_csv(path, ["epoch", "train_mse", "val_mse"], trace)

