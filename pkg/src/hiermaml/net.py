"""Recurrent attention regressor built on the tape engine.

The model is a peephole LSTM over a window of time steps, an attention head
that pools hidden states into a single context vector, and a small dense head
that emits one scalar per window. Peephole connections are diagonal: each is
a length-H vector applied elementwise to the cell state.

Parameters flatten into a single float64 vector in a fixed order so that the
whole model can be treated as a point in parameter space by the optimizers
and the meta-learning loops. Flatten/unflatten is an exact bijection.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from .engine import Graph
from .errors import FormatError, NonFiniteError, ShapeError

FORMAT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    """Shape descriptor: window size, channel count, and layer widths."""

    input_size: int
    time_steps: int
    hidden_size: int
    head_widths: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.head_widths:
            object.__setattr__(self, "head_widths", (self.hidden_size,))
        else:
            object.__setattr__(self, "head_widths", tuple(self.head_widths))

    def param_shapes(self):
        """Ordered (name, shape) pairs defining the flat parameter layout."""
        f, h = self.input_size, self.hidden_size
        shapes = [
            ("w_xi", (f, h)), ("w_hi", (h, h)), ("w_ci", (h,)), ("b_i", (h,)),
            ("w_xf", (f, h)), ("w_hf", (h, h)), ("w_cf", (h,)), ("b_f", (h,)),
            ("w_xc", (f, h)), ("w_hc", (h, h)), ("b_c", (h,)),
            ("w_xo", (f, h)), ("w_ho", (h, h)), ("w_co", (h,)), ("b_o", (h,)),
            ("w_att", (h, 1)), ("b_att", (1,)),
        ]
        widths = (h,) + self.head_widths + (1,)
        for li in range(len(widths) - 1):
            shapes.append((f"head_w{li}", (widths[li], widths[li + 1])))
            shapes.append((f"head_b{li}", (widths[li + 1],)))
        return shapes

    @property
    def n_params(self):
        return sum(int(np.prod(s)) for _, s in self.param_shapes())

    def to_dict(self):
        return {
            "input_size": self.input_size,
            "time_steps": self.time_steps,
            "hidden_size": self.hidden_size,
            "head_widths": list(self.head_widths),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            input_size=int(d["input_size"]),
            time_steps=int(d["time_steps"]),
            hidden_size=int(d["hidden_size"]),
            head_widths=tuple(int(w) for w in d["head_widths"]),
        )


@dataclass
class LstmCell:
    """Gate weights of the recurrent cell (peepholes stored as vectors)."""

    w_xi: np.ndarray
    w_hi: np.ndarray
    w_ci: np.ndarray
    b_i: np.ndarray
    w_xf: np.ndarray
    w_hf: np.ndarray
    w_cf: np.ndarray
    b_f: np.ndarray
    w_xc: np.ndarray
    w_hc: np.ndarray
    b_c: np.ndarray
    w_xo: np.ndarray
    w_ho: np.ndarray
    w_co: np.ndarray
    b_o: np.ndarray


@dataclass
class AttentionHead:
    """Per-step score projection; softmax over steps happens in forward."""

    w: np.ndarray
    b: np.ndarray


@dataclass
class DenseLayer:
    w: np.ndarray
    b: np.ndarray
    activation: str = "linear"


class PredictiveModel:
    """LSTM-attention-dense regressor over fixed-size feature windows.

    Instances are value-like: the meta-learning loops never mutate a model
    in place, they derive new instances via :meth:`with_params`.
    """

    def __init__(self, arch: Architecture, params: np.ndarray):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (arch.n_params,):
            raise ShapeError(
                f"parameter vector has length {params.size}, "
                f"architecture needs {arch.n_params}"
            )
        self.arch = arch
        self.params = params

    # -- construction --------------------------------------------------------

    @classmethod
    def init(cls, arch: Architecture, rng: np.random.Generator):
        """Seeded init: uniform(+-1/sqrt(fan_in)) weights, forget bias 1."""
        chunks = []
        for name, shape in arch.param_shapes():
            if name == "b_f":
                chunks.append(np.ones(shape))
            elif name.startswith("b") or name.startswith("head_b"):
                chunks.append(np.zeros(shape))
            else:
                fan_in = shape[0]
                lim = 1.0 / np.sqrt(fan_in)
                chunks.append(rng.uniform(-lim, lim, size=shape))
        return cls(arch, np.concatenate([c.ravel() for c in chunks]))

    def with_params(self, params: np.ndarray) -> "PredictiveModel":
        return PredictiveModel(self.arch, np.asarray(params, dtype=np.float64).copy())

    # -- flat parameter layout -----------------------------------------------

    def flatten(self) -> np.ndarray:
        return self.params.copy()

    @property
    def n_params(self):
        return self.arch.n_params

    def _views(self):
        """Split the flat vector into named array views (no copies)."""
        out = {}
        offset = 0
        for name, shape in self.arch.param_shapes():
            size = int(np.prod(shape))
            out[name] = self.params[offset:offset + size].reshape(shape)
            offset += size
        return out

    @property
    def cell(self) -> LstmCell:
        v = self._views()
        return LstmCell(**{k: v[k] for k in (
            "w_xi", "w_hi", "w_ci", "b_i", "w_xf", "w_hf", "w_cf", "b_f",
            "w_xc", "w_hc", "b_c", "w_xo", "w_ho", "w_co", "b_o")})

    @property
    def attention(self) -> AttentionHead:
        v = self._views()
        return AttentionHead(w=v["w_att"], b=v["b_att"])

    @property
    def head(self) -> list[DenseLayer]:
        v = self._views()
        n_layers = len(self.arch.head_widths) + 1
        layers = []
        for li in range(n_layers):
            act = "tanh" if li < n_layers - 1 else "linear"
            layers.append(DenseLayer(v[f"head_w{li}"], v[f"head_b{li}"], act))
        return layers

    # -- forward / loss ------------------------------------------------------

    def _check_batch(self, feats):
        feats = np.asarray(feats, dtype=np.float64)
        if feats.size == 0:
            return feats.reshape(0, self.arch.time_steps, self.arch.input_size)
        if feats.ndim != 3:
            raise ShapeError(f"expected a batch of 2-d windows, got ndim {feats.ndim}")
        if feats.shape[1] != self.arch.time_steps:
            raise ShapeError(
                f"time axis has length {feats.shape[1]}, model expects "
                f"{self.arch.time_steps}"
            )
        if feats.shape[2] != self.arch.input_size:
            raise ShapeError(
                f"feature axis has length {feats.shape[2]}, model expects "
                f"{self.arch.input_size}"
            )
        if not np.all(np.isfinite(feats)):
            raise NonFiniteError("input windows contain non-finite values")
        return feats

    def forward(self, feats):
        """Predict one scalar per window.

        Returns ``(predictions, graph)``; the graph exposes ``output_id``
        (prediction node) and ``attention_id`` (softmax weight node) for the
        loss builders and tests.
        """
        feats = self._check_batch(feats)
        graph = Graph(n_params=self.n_params)
        if feats.shape[0] == 0:
            graph.output_id = None
            graph.attention_id = None
            return np.zeros(0), graph
        x = graph.const(feats)
        pids = {}
        offset = 0
        views = self._views()
        for name, shape in self.arch.param_shapes():
            size = int(np.prod(shape))
            pids[name] = graph.param(views[name], offset, offset + size)
            offset += size
        hs = graph.apply(
            "lstm_seq", x,
            pids["w_xi"], pids["w_hi"], pids["w_ci"], pids["b_i"],
            pids["w_xf"], pids["w_hf"], pids["w_cf"], pids["b_f"],
            pids["w_xc"], pids["w_hc"], pids["b_c"],
            pids["w_xo"], pids["w_ho"], pids["w_co"], pids["b_o"],
        )
        scores = graph.apply("attn_scores", hs, pids["w_att"], pids["b_att"])
        weights = graph.apply("softmax_rows", scores)
        out = graph.apply("attn_mix", weights, hs)
        n_layers = len(self.arch.head_widths) + 1
        for li in range(n_layers):
            out = graph.apply("dense", out, pids[f"head_w{li}"], pids[f"head_b{li}"])
            if li < n_layers - 1:
                out = graph.apply("tanh", out)
        graph.output_id = out
        graph.attention_id = weights
        return graph.value(out).ravel().copy(), graph

    def loss_and_grad(self, params, feats, labels):
        """Mean squared error and its gradient at ``params``.

        Returns ``(loss, grad, predictions)``.
        """
        model = PredictiveModel(self.arch, np.asarray(params, dtype=np.float64))
        preds, graph = model.forward(feats)
        y = graph.const(np.asarray(labels, dtype=np.float64))
        loss_id = graph.apply("mse", graph.output_id, y)
        grad = graph.backward(loss_id)
        return float(graph.value(loss_id)), grad, preds

    def predict(self, params, feats):
        model = PredictiveModel(self.arch, np.asarray(params, dtype=np.float64))
        preds, _ = model.forward(feats)
        return preds

    def attention_weights(self, feats):
        """Softmax pooling weights, one row per window (rows sum to 1)."""
        _, graph = self.forward(feats)
        if graph.attention_id is None:
            return np.zeros((0, self.arch.time_steps))
        return graph.value(graph.attention_id).copy()


def mse_loss(predictions, labels) -> float:
    """Mean squared error; lengths must match and be non-zero."""
    predictions = np.asarray(predictions, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if predictions.size == 0 or predictions.size != labels.size:
        raise ValueError(
            f"need equal non-zero lengths, got {predictions.size} and {labels.size}"
        )
    diff = predictions - labels
    return float(np.mean(diff * diff))


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients with central differences."""

    rel_errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    tol: float
    flagged: list = field(default_factory=list)

    @property
    def max_rel_error(self):
        return float(self.rel_errors.max()) if self.rel_errors.size else 0.0

    @property
    def ok(self):
        return not self.flagged


def grad_check(model, feats, labels, step=1e-5, tol=1e-4, grad_override=None):
    """Compare the tape gradient against central finite differences.

    Relative error per parameter uses max(|analytic|, |numeric|, 1e-8) as the
    denominator. ``grad_override`` substitutes a fake analytic gradient; the
    report then flags where it disagrees (used for fault-injection tests).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    feats = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if feats.shape[0] == 0:
        raise ValueError("grad_check needs a non-empty batch")
    base = model.flatten()
    if grad_override is not None:
        analytic = np.asarray(grad_override, dtype=np.float64)
    else:
        _, analytic, _ = model.loss_and_grad(base, feats, labels)
    numeric = np.empty_like(base)
    for j in range(base.size):
        bumped = base.copy()
        bumped[j] = base[j] + step
        up = mse_loss(model.predict(bumped, feats), labels)
        bumped[j] = base[j] - step
        down = mse_loss(model.predict(bumped, feats), labels)
        numeric[j] = (up - down) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    flagged = [
        (int(j), float(analytic[j]), float(numeric[j]), float(rel[j]))
        for j in np.nonzero(rel > tol)[0]
    ]
    return GradCheckReport(rel, analytic, numeric, tol, flagged)


# -- model file round trip ----------------------------------------------------

def save_model(model: PredictiveModel, path, extra=None):
    """Write a self-describing container; round trip is bit-exact.

    ``extra`` adds run-metadata keys (ignored on load except for retrieval
    via :func:`read_model_extra`).
    """
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": "predictive-model",
        "arch": model.arch.to_dict(),
        "dtype": "<f8",
        "n_params": model.n_params,
        "params_b64": base64.b64encode(
            np.ascontiguousarray(model.params, dtype="<f8").tobytes()
        ).decode("ascii"),
    }
    if extra:
        payload["extra"] = dict(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def read_model_extra(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return dict(json.load(fh).get("extra") or {})
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"unreadable model file {path}: {exc}") from exc


def model_to_dict(model: PredictiveModel):
    return {
        "arch": model.arch.to_dict(),
        "params_b64": base64.b64encode(
            np.ascontiguousarray(model.params, dtype="<f8").tobytes()
        ).decode("ascii"),
    }


def model_from_dict(d):
    arch = Architecture.from_dict(d["arch"])
    raw = base64.b64decode(d["params_b64"])
    params = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if params.size != arch.n_params:
        raise FormatError(
            f"payload holds {params.size} parameters, descriptor says {arch.n_params}"
        )
    return PredictiveModel(arch, params)


def load_model(path) -> PredictiveModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"unreadable model file {path}: {exc}") from exc
    if payload.get("kind") != "predictive-model":
        raise FormatError(f"{path} is not a model file")
    if payload.get("format_version") != FORMAT_VERSION:
        raise FormatError(
            f"unsupported model format version {payload.get('format_version')}"
        )
    if payload.get("dtype") != "<f8":
        raise FormatError(f"unsupported dtype {payload.get('dtype')}")
    try:
        model = model_from_dict(payload)
    except (KeyError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"corrupt model file {path}: {exc}") from exc
    if payload.get("n_params") != model.n_params:
        raise FormatError(
            f"descriptor n_params {payload.get('n_params')} disagrees with payload"
        )
    return model
