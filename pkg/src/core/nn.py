"""nn-core: flache Parameter-Speicher, MLP/GRU mit analytischen Gradienten.

Minimaler differenzierbarer Kern ohne Tape: jede Schicht kennt ihren
Vorwärts-, Rückwärts- und Vorwärts-Modus (JVP). Dazu SGD, Adam und ein
Finite-Differenzen-Prüfer. Alles in float64.

Konvention GRU / GRU convention:
    z  = sigmoid(W_z x + U_z h + b_z)
    r  = sigmoid(W_r x + U_r h + b_r)
    h~ = tanh(W_h x + U_h (r * h) + b_h)
    h' = (1 - z) * h + z * h~
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from src.core.errors import ConfigError, NonFiniteGradientError
from src.utils.logger import get_logger

logger = get_logger(__name__)

Segment = tuple[str, tuple[int, ...]]
Layout = tuple[Segment, ...]

ACTIVATIONS = ("relu", "tanh", "identity")


# ---------------------------------------------------------------------------
# ParamVector
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ParamVector:
    """Flacher float64-Vektor mit benannten Segmenten.

    Flat parameter storage; segments are views into `values`.
    """

    values: np.ndarray
    layout: Layout
    _offsets: dict[str, tuple[int, tuple[int, ...]]] = field(
        init=False, repr=False, default_factory=dict
    )

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        self.layout = tuple((str(n), tuple(int(d) for d in s)) for n, s in self.layout)
        if self.values.ndim != 1:
            raise ConfigError(f"ParamVector erwartet 1-D Werte, bekam {self.values.shape}")
        offset = 0
        for name, shape in self.layout:
            if name in self._offsets:
                raise ConfigError(f"Doppeltes Segment: {name}")
            self._offsets[name] = (offset, shape)
            offset += int(np.prod(shape, dtype=np.int64))
        if offset != self.values.size:
            raise ConfigError(
                f"Layout-Größe {offset} passt nicht zu {self.values.size} Werten"
            )

    @classmethod
    def zeros(cls, layout: Layout) -> "ParamVector":
        size = sum(int(np.prod(s, dtype=np.int64)) for _, s in layout)
        return cls(np.zeros(size), layout)

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ParamVector":
        """Baut einen Vektor aus benannten Arrays (Reihenfolge bleibt erhalten)."""
        layout = tuple((name, np.shape(arr)) for name, arr in arrays.items())
        flat = [np.asarray(a, dtype=np.float64).ravel() for a in arrays.values()]
        values = np.concatenate(flat) if flat else np.zeros(0)
        return cls(values, layout)

    @property
    def size(self) -> int:
        return int(self.values.size)

    def segment(self, name: str) -> np.ndarray:
        """View auf ein Segment in seiner Form (Schreibzugriff wirkt auf values)."""
        try:
            start, shape = self._offsets[name]
        except KeyError:
            raise ConfigError(f"Segment nicht vorhanden: {name}") from None
        size = int(np.prod(shape, dtype=np.int64))
        return self.values[start : start + size].reshape(shape)

    def has_segments(self, layout: Layout) -> bool:
        return all(
            name in self._offsets and self._offsets[name][1] == tuple(shape)
            for name, shape in layout
        )

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.array(values, dtype=np.float64), self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.layout)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


def _as_values(x: "ParamVector | np.ndarray") -> np.ndarray:
    return x.values if isinstance(x, ParamVector) else np.asarray(x, dtype=np.float64)


def _check_params(layout: Layout, params: ParamVector, what: str) -> None:
    if not params.has_segments(layout):
        raise ConfigError(f"Parameter-Layout passt nicht zur {what}-Spezifikation")


# ---------------------------------------------------------------------------
# Aktivierungen
# ---------------------------------------------------------------------------


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_slope(kind: str, z: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Ableitung der Aktivierung, ausgedrückt über Vor- und Nachaktivierung."""
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - out * out
    return np.ones_like(z)


def sigmoid(z: np.ndarray) -> np.ndarray:
    # numerisch stabil für große |z|
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpSpec:
    """Architektur eines MLP; Default: relu in versteckten Schichten, identity am Ausgang."""

    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int
    activations: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.activations:
            acts = ("relu",) * len(self.hidden_dims) + ("identity",)
            object.__setattr__(self, "activations", acts)
        else:
            object.__setattr__(self, "activations", tuple(self.activations))
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ConfigError(f"Alle MLP-Dimensionen müssen >= 1 sein: {dims}")
        if len(self.activations) != self.n_layers:
            raise ConfigError(
                f"{len(self.activations)} Aktivierungen für {self.n_layers} Schichten"
            )
        unknown = set(self.activations) - set(ACTIVATIONS)
        if unknown:
            raise ConfigError(f"Unbekannte Aktivierung(en): {sorted(unknown)}")

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims, self.output_dim)
        return [(dims[i], dims[i + 1]) for i in range(self.n_layers)]

    def layout(self) -> Layout:
        segs: list[Segment] = []
        for i, (d_in, d_out) in enumerate(self.layer_dims()):
            segs.append((f"W{i}", (d_out, d_in)))
            segs.append((f"b{i}", (d_out,)))
        return tuple(segs)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple[int, ...]) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_mlp_params(spec: MlpSpec, rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform Gewichte, Null-Biases."""
    arrays: dict[str, np.ndarray] = {}
    for i, (d_in, d_out) in enumerate(spec.layer_dims()):
        arrays[f"W{i}"] = _glorot(rng, d_in, d_out, (d_out, d_in))
        arrays[f"b{i}"] = np.zeros(d_out)
    return ParamVector.from_arrays(arrays)


@dataclass
class MlpCache:
    """Zwischenwerte eines Vorwärtslaufs (pro Schicht: Eingang, Vor-, Nachaktivierung)."""

    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    post: list[np.ndarray]
    squeeze: bool


def _as_batch(x: np.ndarray, dim: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    batch = x[None, :] if squeeze else x
    if batch.ndim != 2 or batch.shape[1] != dim:
        raise ConfigError(f"{what}: erwartet Dimension {dim}, bekam Form {x.shape}")
    return batch, squeeze


def mlp_forward(spec: MlpSpec, params: ParamVector, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    """Vorwärtslauf für einen Vektor (in,) oder eine Batch (n, in)."""
    _check_params(spec.layout(), params, "MLP")
    h, squeeze = _as_batch(x, spec.input_dim, "mlp input")
    cache = MlpCache([], [], [], squeeze)
    for i, kind in enumerate(spec.activations):
        W = params.segment(f"W{i}")
        b = params.segment(f"b{i}")
        z = h @ W.T + b
        out = _activate(kind, z)
        cache.inputs.append(h)
        cache.pre.append(z)
        cache.post.append(out)
        h = out
    return (h[0] if squeeze else h), cache


def mlp_eval(spec: MlpSpec, params: ParamVector, x: np.ndarray) -> np.ndarray:
    return mlp_forward(spec, params, x)[0]


def mlp_backward(
    spec: MlpSpec, params: ParamVector, cache: MlpCache, upstream: np.ndarray
) -> tuple[ParamVector, np.ndarray]:
    """Rückwärtslauf; Parameter-Gradienten werden über die Batch summiert."""
    g, _ = _as_batch(upstream, spec.output_dim, "mlp upstream")
    if g.shape[0] != cache.inputs[0].shape[0]:
        raise ConfigError("Upstream-Batchgröße passt nicht zum Vorwärtslauf")
    grads: dict[str, np.ndarray] = {}
    for i in reversed(range(spec.n_layers)):
        kind = spec.activations[i]
        dz = g * _activation_slope(kind, cache.pre[i], cache.post[i])
        grads[f"W{i}"] = dz.T @ cache.inputs[i]
        grads[f"b{i}"] = dz.sum(axis=0)
        g = dz @ params.segment(f"W{i}")
    ordered = {name: grads[name] for name, _ in spec.layout()}
    grad_params = ParamVector.from_arrays(ordered)
    return grad_params, (g[0] if cache.squeeze else g)


def mlp_grad(
    spec: MlpSpec, params: ParamVector, x: np.ndarray, upstream: np.ndarray
) -> tuple[ParamVector, np.ndarray]:
    """Gradient von upstream·mlp(x) nach Parametern und Eingang."""
    _, cache = mlp_forward(spec, params, x)
    return mlp_backward(spec, params, cache, upstream)


def mlp_jvp(
    spec: MlpSpec, params: ParamVector, x: np.ndarray, tangent: ParamVector
) -> tuple[np.ndarray, np.ndarray]:
    """Vorwärts-Modus: Ausgabe und ihre Richtungsableitung in Richtung `tangent`.

    Liefert pro Sample d mlp(x; params + t*tangent)/dt bei t=0, der Eingang
    bleibt fest. Per-sample directional derivatives w.r.t. the parameters.
    """
    _check_params(spec.layout(), params, "MLP")
    _check_params(spec.layout(), tangent, "MLP-Tangente")
    h, squeeze = _as_batch(x, spec.input_dim, "mlp input")
    dh = np.zeros_like(h)
    for i, kind in enumerate(spec.activations):
        W = params.segment(f"W{i}")
        z = h @ W.T + params.segment(f"b{i}")
        dz = h @ tangent.segment(f"W{i}").T + dh @ W.T + tangent.segment(f"b{i}")
        out = _activate(kind, z)
        dh = dz * _activation_slope(kind, z, out)
        h = out
    if squeeze:
        return h[0], dh[0]
    return h, dh


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GruSpec:
    input_dim: int
    hidden_dim: int

    def __post_init__(self) -> None:
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ConfigError(f"GRU-Dimensionen müssen >= 1 sein: {self}")

    def layout(self) -> Layout:
        i, h = self.input_dim, self.hidden_dim
        segs: list[Segment] = []
        for gate in ("z", "r", "h"):
            segs += [(f"W_{gate}", (h, i)), (f"U_{gate}", (h, h)), (f"b_{gate}", (h,))]
        return tuple(segs)


def init_gru_params(spec: GruSpec, rng: np.random.Generator) -> ParamVector:
    i, h = spec.input_dim, spec.hidden_dim
    arrays: dict[str, np.ndarray] = {}
    for gate in ("z", "r", "h"):
        arrays[f"W_{gate}"] = _glorot(rng, i, h, (h, i))
        arrays[f"U_{gate}"] = _glorot(rng, h, h, (h, h))
        arrays[f"b_{gate}"] = np.zeros(h)
    return ParamVector.from_arrays(arrays)


@dataclass
class _GruStepCache:
    x: np.ndarray
    h: np.ndarray
    z: np.ndarray
    r: np.ndarray
    cand: np.ndarray


def _gru_forward(params: ParamVector, h: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, _GruStepCache]:
    p = params.segment
    z = sigmoid(x @ p("W_z").T + h @ p("U_z").T + p("b_z"))
    r = sigmoid(x @ p("W_r").T + h @ p("U_r").T + p("b_r"))
    cand = np.tanh(x @ p("W_h").T + (r * h) @ p("U_h").T + p("b_h"))
    h_new = (1.0 - z) * h + z * cand
    return h_new, _GruStepCache(x, h, z, r, cand)


def _gru_backward(
    params: ParamVector, c: _GruStepCache, dh_new: np.ndarray, grads: dict[str, np.ndarray]
) -> np.ndarray:
    """Akkumuliert Parameter-Gradienten in `grads`, gibt dL/dh_prev zurück."""
    p = params.segment
    dz = dh_new * (c.cand - c.h)
    dcand = dh_new * c.z
    dh = dh_new * (1.0 - c.z)

    da_h = dcand * (1.0 - c.cand * c.cand)
    rh = c.r * c.h
    grads["W_h"] += da_h.T @ c.x
    grads["U_h"] += da_h.T @ rh
    grads["b_h"] += da_h.sum(axis=0)
    drh = da_h @ p("U_h")
    dr = drh * c.h
    dh += drh * c.r

    da_z = dz * c.z * (1.0 - c.z)
    grads["W_z"] += da_z.T @ c.x
    grads["U_z"] += da_z.T @ c.h
    grads["b_z"] += da_z.sum(axis=0)
    dh += da_z @ p("U_z")

    da_r = dr * c.r * (1.0 - c.r)
    grads["W_r"] += da_r.T @ c.x
    grads["U_r"] += da_r.T @ c.h
    grads["b_r"] += da_r.sum(axis=0)
    dh += da_r @ p("U_r")
    return dh


def gru_step(spec: GruSpec, params: ParamVector, hidden: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Ein GRU-Schritt für (H,)/(I,) oder Batches (n,H)/(n,I)."""
    _check_params(spec.layout(), params, "GRU")
    h, squeeze = _as_batch(hidden, spec.hidden_dim, "gru hidden")
    xb, _ = _as_batch(x, spec.input_dim, "gru input")
    if xb.shape[0] != h.shape[0]:
        raise ConfigError("GRU: Batchgrößen von Eingang und Hidden-State unterscheiden sich")
    h_new, _ = _gru_forward(params, h, xb)
    return h_new[0] if squeeze else h_new


def _sequence_batch(spec: GruSpec, inputs: np.ndarray) -> tuple[np.ndarray, bool]:
    seq = np.asarray(inputs, dtype=np.float64)
    if seq.ndim == 0 or seq.shape[0] == 0:
        raise ValueError("GRU-Sequenz darf nicht leer sein")
    squeeze = seq.ndim == 2
    seq = seq[:, None, :] if squeeze else seq
    if seq.ndim != 3 or seq.shape[2] != spec.input_dim:
        raise ConfigError(f"GRU-Sequenz: erwartet (T, [n,] {spec.input_dim}), bekam {np.shape(inputs)}")
    return seq, squeeze


def _initial_hidden(spec: GruSpec, h0: np.ndarray | None, batch: int) -> np.ndarray:
    if h0 is None:
        return np.zeros((batch, spec.hidden_dim))
    return np.array(h0, dtype=np.float64).reshape(batch, spec.hidden_dim)


def gru_sequence(
    spec: GruSpec, params: ParamVector, inputs: np.ndarray, h0: np.ndarray | None = None
) -> np.ndarray:
    """Entrollt die GRU über (T, I) bzw. (T, n, I); liefert alle Hidden-States."""
    _check_params(spec.layout(), params, "GRU")
    seq, squeeze = _sequence_batch(spec, inputs)
    h = _initial_hidden(spec, h0, seq.shape[1])
    states = []
    for x in seq:
        h, _ = _gru_forward(params, h, x)
        states.append(h)
    out = np.stack(states)
    return out[:, 0, :] if squeeze else out


def gru_sequence_grad(
    spec: GruSpec,
    params: ParamVector,
    inputs: np.ndarray,
    upstreams: np.ndarray,
    h0: np.ndarray | None = None,
) -> ParamVector:
    """Gradient von sum_t upstream_t · h_t durch die entrollte Rekurrenz (BPTT)."""
    _check_params(spec.layout(), params, "GRU")
    seq, squeeze = _sequence_batch(spec, inputs)
    ups = np.asarray(upstreams, dtype=np.float64)
    ups = ups[:, None, :] if squeeze else ups
    if ups.shape != (seq.shape[0], seq.shape[1], spec.hidden_dim):
        raise ConfigError(f"Upstreams-Form {np.shape(upstreams)} passt nicht zur Sequenz")

    h = _initial_hidden(spec, h0, seq.shape[1])
    caches: list[_GruStepCache] = []
    for x in seq:
        h, cache = _gru_forward(params, h, x)
        caches.append(cache)

    grads = {name: np.zeros(shape) for name, shape in spec.layout()}
    dh_next = np.zeros_like(h)
    for t in reversed(range(len(caches))):
        dh_next = _gru_backward(params, caches[t], ups[t] + dh_next, grads)
    return ParamVector.from_arrays(grads)


# ---------------------------------------------------------------------------
# Optimierer
# ---------------------------------------------------------------------------


def _checked_grad(grad: "ParamVector | np.ndarray", size: int) -> np.ndarray:
    g = _as_values(grad)
    if g.shape != (size,):
        raise ConfigError(f"Gradientenform {g.shape} passt nicht zu {size} Parametern")
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError("Gradient enthält NaN/Inf")
    return g


def sgd_step(params: ParamVector, grad: "ParamVector | np.ndarray", lr: float) -> ParamVector:
    """Exakt params - lr * grad."""
    if not lr > 0:
        raise ValueError(f"Lernrate muss > 0 sein, bekam {lr}")
    g = _checked_grad(grad, params.size)
    return params.with_values(params.values - lr * g)


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigError(f"Adam-Betas müssen in (0,1) liegen: {self.beta1}, {self.beta2}")
        if self.lr <= 0:
            raise ConfigError(f"Adam-Lernrate muss > 0 sein: {self.lr}")


def adam_init(size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(np.zeros(size), np.zeros(size), 0, lr, beta1, beta2, eps)


def adam_step(
    state: AdamState, params: ParamVector, grad: "ParamVector | np.ndarray"
) -> tuple[AdamState, ParamVector]:
    """Bias-korrigierter Adam-Schritt; gibt neuen Zustand und neue Parameter zurück."""
    g = _checked_grad(grad, params.size)
    if state.first_moment.shape != g.shape:
        raise ConfigError("Adam-Zustand passt nicht zur Parametergröße")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_values = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
    return new_state, params.with_values(new_values)


# ---------------------------------------------------------------------------
# Finite Differenzen
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Ergebnis einer Gradientenprüfung.

    max_rel_error = max_i |analytic_i - numeric_i| / max(||analytic||_inf, ||numeric||_inf),
    also relativ zur größten Gradientenkomponente.
    """

    name: str
    max_rel_error: float
    tolerance: float
    n_coords: int
    worst_index: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= self.tolerance)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"[{status}] {self.name}: max rel. Fehler {self.max_rel_error:.3e} "
            f"(Toleranz {self.tolerance:.0e}, {self.n_coords} Koordinaten)"
        )


def central_differences(
    fn: Callable[[np.ndarray], float],
    params: np.ndarray,
    step: float = 1e-5,
    coords: np.ndarray | None = None,
) -> np.ndarray:
    """Zentrale Differenzen (f(x+h) - f(x-h)) / 2h für ausgewählte Koordinaten."""
    x0 = np.array(params, dtype=np.float64)
    idx = np.arange(x0.size) if coords is None else np.asarray(coords)
    numeric = np.zeros(idx.size)
    for k, i in enumerate(idx):
        x = x0.copy()
        x[i] = x0[i] + step
        f_plus = float(fn(x))
        x[i] = x0[i] - step
        f_minus = float(fn(x))
        numeric[k] = (f_plus - f_minus) / (2.0 * step)
    return numeric


def finite_diff_check(
    fn: Callable[[np.ndarray], float],
    params: "ParamVector | np.ndarray",
    analytic: "ParamVector | np.ndarray",
    tolerance: float = 1e-6,
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    name: str = "gradient",
) -> GradCheckReport:
    """Vergleicht einen analytischen Gradienten mit zentralen Differenzen.

    Reports the maximum relative error; never raises on mismatch.
    """
    if tolerance <= 0:
        raise ValueError("Toleranz muss > 0 sein")
    x0 = _as_values(params)
    grad = _as_values(analytic)
    coords = None
    if max_coords is not None and max_coords < x0.size:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = np.sort(gen.choice(x0.size, size=max_coords, replace=False))
    numeric = central_differences(fn, x0, step, coords)
    expected = grad if coords is None else grad[coords]
    scale = max(float(np.max(np.abs(expected), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    diff = np.abs(expected - numeric)
    worst = int(np.argmax(diff)) if diff.size else 0
    err = float(diff[worst] / scale) if diff.size else 0.0
    report = GradCheckReport(name, err, tolerance, int(numeric.size), worst)
    logger.debug("%s", report)
    return report
