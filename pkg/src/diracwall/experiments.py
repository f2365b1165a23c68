"""Reconstruction experiments: configurations, references, noise, metrics and reports."""

from dataclasses import asdict, dataclass, field, fields, replace
import csv
import hashlib
import json
import os
import sys

import numpy as np
from scipy.interpolate import RegularGridInterpolator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from . import adjoint_inversion as ai
from . import spectral_basis as sb
from .greens_slab import PotentialRep, TrappedModeError

REFERENCES = ("letter_h", "cosine", "sigma3_linear", "sigma0_linear")


# ------------------------------------------------------------------ configuration


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "custom"
    n_x: int = 8
    n_y: int = 10
    n_E: int = 10
    E_min: float = 1.5
    E_max: float = 15.0
    interval: tuple = (-0.4, 0.4)
    obs: str = "M0"
    sigma: float = 0.0
    seed: int = 0
    eta: float = None
    iters: int = 300
    reference: str = "letter_h"
    amplitude: float = 1.0
    line_search: bool = False
    precondition: bool = True
    n_nodes: int = None

    def __post_init__(self):
        object.__setattr__(self, "interval", tuple(float(v) for v in self.interval))
        if self.obs not in ai.PRESETS:
            raise ValueError(f"unknown observation preset {self.obs!r}")
        if self.reference not in REFERENCES:
            raise ValueError(f"unknown reference {self.reference!r}; expected one of {REFERENCES}")
        if self.eta is not None and self.eta <= 0:
            raise ValueError("eta must be positive")

    def energies(self):
        E = np.linspace(self.E_min, self.E_max, self.n_E)
        for value in E:
            sb.check_energy(value, self.n_y)
        return tuple(float(v) for v in E)

    def to_dict(self):
        out = {k: v for k, v in asdict(self).items() if v is not None}
        out["interval"] = list(self.interval)
        return out

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def with_overrides(self, **kw):
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def digest(self):
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def save(self, path):
        doc = self.to_dict()
        if str(path).endswith(".json"):
            text = json.dumps(doc, indent=1)
        else:
            text = tomli_w.dumps(doc)
        with open(path, "w") as fh:
            fh.write(text)

    @classmethod
    def load(cls, path):
        if str(path).endswith(".json"):
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))


_WALL = dict(n_x=6, n_y=10, n_E=18, interval=(-0.2, 0.2), iters=600)

PRESETS = {
    "exp1": ExperimentConfig("exp1", n_x=16, n_y=20, n_E=18, iters=600, reference="letter_h"),
    "exp1-small": ExperimentConfig("exp1-small", n_x=8, n_y=10, n_E=10, iters=300, reference="letter_h"),
    "exp2": ExperimentConfig("exp2", reference="cosine", obs="MA", **_WALL),
    "exp2-small": ExperimentConfig(
        "exp2-small", n_x=4, n_y=6, n_E=8, interval=(-0.2, 0.2), iters=200, reference="cosine", obs="MA"
    ),
    "exp3": ExperimentConfig("exp3", reference="sigma3_linear", **_WALL),
    "exp4": ExperimentConfig("exp4", reference="sigma0_linear", obs="MT", **_WALL),
}


def preset(name, **overrides):
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None
    return base.with_overrides(**overrides)


# ------------------------------------------------------------------ reference potentials


def letter_h_raster(size=64):
    """Monochrome 'H' on a ``size x size`` grid indexed ``[x, y]``."""
    t = (np.arange(size) + 0.5) / size
    X, Y = np.meshgrid(t, t, indexing="ij")
    legs = ((X > 0.15) & (X < 0.35)) | ((X > 0.65) & (X < 0.85))
    bar = (X >= 0.35) & (X <= 0.65) & (np.abs(Y - 0.5) < 0.07)
    return ((legs & (np.abs(Y - 0.5) < 0.37)) | bar).astype(float)


@dataclass(frozen=True)
class QuadratureGrid:
    """Gauss-Legendre x Gauss-Hermite grid for projections onto ``P_j(x) phi_k(y)``."""

    x: np.ndarray
    wx: np.ndarray
    y: np.ndarray
    wy: np.ndarray
    Px: np.ndarray
    Hy: np.ndarray

    @classmethod
    def build(cls, n_x, n_y, interval, oversample=2):
        x, wx = sb.gauss_legendre(oversample * (n_x + 1), *interval)
        y, wy = sb.gauss_hermite(oversample * (n_y + 1))
        Px = sb.legendre_table(n_x, sb.to_reference(x, interval)).T
        Hy = sb.hermite_functions(n_y, y).T
        # Hermite functions carry the Gaussian themselves; undo the rule's weight
        return cls(x, wx, y, wy * np.exp(y * y), Px, Hy)

    def project(self, F):
        """Weighted least-squares coefficients ``c[j, k]`` of grid samples ``F[x, y]``."""
        ax = np.sqrt(self.wx)[:, None]
        ay = np.sqrt(self.wy)[:, None]
        left = np.linalg.lstsq(ax * self.Px, ax * F, rcond=None)[0]
        return np.linalg.lstsq(ay * self.Hy, ay * left.T, rcond=None)[0].T

    def evaluate(self, coeffs):
        return self.Px @ coeffs @ self.Hy.T


def raster_to_basis(image, n_x, n_y, interval, y_range=(-3.0, 3.0), x_grid=None, y_grid=None, channel=0):
    """Project a real image onto ``P_j(x) phi_k(y) sigma_channel``.

    Pixel centres span ``interval`` in ``x`` and ``y_range`` in ``y`` unless
    explicit ``x_grid``/``y_grid`` coordinates are given; values are linearly
    interpolated to the quadrature grid and zero outside the image.
    """
    image = np.asarray(image, dtype=float)
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    grid = QuadratureGrid.build(n_x, n_y, interval)
    if x_grid is None:
        a, b = interval
        x_grid = a + (b - a) * (np.arange(image.shape[0]) + 0.5) / image.shape[0]
    if y_grid is None:
        lo, hi = y_range
        y_grid = lo + (hi - lo) * (np.arange(image.shape[1]) + 0.5) / image.shape[1]
    interp = RegularGridInterpolator((x_grid, y_grid), image, bounds_error=False, fill_value=0.0)
    X, Y = np.meshgrid(grid.x, grid.y, indexing="ij")
    # points beyond the outermost pixel centres but inside the support clamp to the edge
    xs = np.clip(X, x_grid[0], x_grid[-1])
    F = interp(np.stack([xs, Y], axis=-1))
    coeffs = np.zeros((n_x + 1, n_y + 1, 4))
    coeffs[:, :, channel] = grid.project(F)
    return PotentialRep(interval, coeffs, "hermite")


def reference_setup(config):
    """Reference potential and the reconstruction basis it lives on."""
    a, b = config.interval
    amp = config.amplitude
    if config.reference == "letter_h":
        V = raster_to_basis(amp * letter_h_raster(), config.n_x, config.n_y, config.interval)
        basis = ai.PotentialBasis(config.interval, config.n_x, config.n_y, "hermite", (0,))
    elif config.reference == "cosine":
        grid = QuadratureGrid.build(config.n_x, config.n_y, config.interval)
        X, Y = np.meshgrid(grid.x, grid.y, indexing="ij")
        F = amp * np.pi**0.25 * np.cos(2 * np.pi * X / (b - a)) * np.exp(-0.5 * Y * Y)
        coeffs = np.zeros((config.n_x + 1, config.n_y + 1, 4))
        coeffs[:, :, 0] = grid.project(F)
        V = PotentialRep(config.interval, coeffs, "hermite")
        basis = ai.PotentialBasis(config.interval, config.n_x, config.n_y, "hermite", (0,))
    else:
        channel = 3 if config.reference == "sigma3_linear" else 0
        # with x = c + h t on the interval, x + 0.1 = (c + 0.1) P_0 + h P_1
        coeffs = np.zeros((config.n_x + 1, 1, 4))
        coeffs[0, 0, channel] = amp * (0.5 * (a + b) + 0.1)
        coeffs[1, 0, channel] = amp * 0.5 * (b - a)
        V = PotentialRep(config.interval, coeffs, "uniform")
        basis = ai.PotentialBasis(config.interval, config.n_x, 0, "uniform", (channel,))
    return V, basis


# ------------------------------------------------------------------ noise


def standard_normals(seed, count):
    """Box-Muller normals from a counter-based (Philox) uniform stream."""
    gen = np.random.Generator(np.random.Philox(seed))
    half = (count + 1) // 2
    u1 = 1.0 - gen.random(half)
    u2 = gen.random(half)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * half)
    z[0::2] = r * np.cos(2 * np.pi * u2)
    z[1::2] = r * np.sin(2 * np.pi * u2)
    return z[:count]


def inject_noise(T_ref, T0, sigma, seed):
    """``T0 + (1 + sigma z) (T_ref - T0)`` entrywise with one ``z`` realization per seed."""
    T_ref = np.asarray(T_ref, dtype=complex)
    T0 = np.asarray(T0, dtype=complex)
    if T_ref.shape != T0.shape:
        raise ValueError("reference and initial data have different shapes")
    z = standard_normals(seed, T_ref.size).reshape(T_ref.shape)
    # written as T_ref + ... so that sigma = 0 reproduces T_ref bit for bit
    return T_ref + sigma * z * (T_ref - T0)


# ------------------------------------------------------------------ metrics


def normalized_misfit(T, T_ref, T_initial, weights=None):
    """``S(i)``: misfit of ``T`` against ``T_ref`` relative to that of ``T_initial``."""
    w = 1.0 if weights is None else np.asarray(weights)
    num = float(np.sum(w * np.abs(np.asarray(T) - T_ref) ** 2))
    den = float(np.sum(w * np.abs(np.asarray(T_initial) - T_ref) ** 2))
    return num / den if den > 0 else num


def relative_error(kappa, kappa_ref, weights):
    """``E(i)``: weighted squared coefficient error relative to the reference."""
    den = float(np.sum(weights * kappa_ref**2))
    if den == 0:
        return float("nan")
    return float(np.sum(weights * (kappa - kappa_ref) ** 2)) / den


def average_error(kappa, kappa_ref):
    """``E_avg(i)``: squared relative error of the mean coefficient ``kappa[0]``."""
    if abs(kappa_ref[0]) <= 1e-12 * np.linalg.norm(kappa_ref):
        return float("nan")
    return float(((kappa[0] - kappa_ref[0]) / kappa_ref[0]) ** 2)


@dataclass
class MetricTracker:
    T_ref: np.ndarray
    T_initial: np.ndarray
    kappa_ref: np.ndarray
    weights: np.ndarray

    def misfit(self, T):
        return normalized_misfit(np.asarray(T), self.T_ref, self.T_initial)

    def error(self, kappa):
        return relative_error(kappa, self.kappa_ref, self.weights)

    def error_avg(self, kappa):
        return average_error(kappa, self.kappa_ref)


@dataclass
class MetricReport:
    config: ExperimentConfig
    run: ai.ReconstructionRun
    paths: dict = field(default_factory=dict)

    @property
    def records(self):
        return self.run.records

    def column(self, key):
        return np.array([r[key] for r in self.records])

    @property
    def final(self):
        return self.records[-1]


# ------------------------------------------------------------------ driver


class ExperimentError(RuntimeError):
    pass


def prepare(config):
    """Everything a run needs before descending: ``(model, obs, tracker)``."""
    V, basis = reference_setup(config)
    energies = config.energies()
    model = ai.ForwardModel(basis, energies, config.n_y, config.n_nodes)
    kappa_ref = basis.coefficients(V)
    T_ref = np.array(model.tr(kappa_ref))
    T0 = np.array(model.tr(basis.zeros()))
    data = inject_noise(T_ref, T0, config.sigma, config.seed)
    obs = ai.ObservationSet.from_preset(config.obs, energies, config.n_y, data)
    tracker = MetricTracker(T_ref, T0, kappa_ref, basis.legendre_weights())
    return model, obs, tracker


def run_experiment(config, out_dir=None, progress=None):
    try:
        model, obs, tracker = prepare(config)
    except TrappedModeError as exc:
        raise ExperimentError(f"reference data: {exc} (config {config.name}, digest {config.digest()})") from exc
    run = ai.ReconstructionRun(
        model.basis, config.eta, config.iters, config.seed, config.line_search, config.precondition
    )
    try:
        ai.descend(run, model, obs, tracker, progress=progress)
    except ai.IterationError as exc:
        raise ExperimentError(f"{exc} (config {config.name}, digest {config.digest()})") from exc
    report = MetricReport(config, run)
    if out_dir is not None:
        report.paths = write_artifacts(report, tracker, out_dir)
    return report


def write_artifacts(report, tracker, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "history": os.path.join(out_dir, "history.csv"),
        "kappa": os.path.join(out_dir, "kappa.json"),
        "grid": os.path.join(out_dir, "potential_grid.csv"),
        "config": os.path.join(out_dir, "config.toml"),
    }
    ai.write_history(report.run, paths["history"])
    ai.write_kappa(report.run, paths["kappa"])
    report.config.save(paths["config"])
    basis = report.run.basis
    final = basis.potential(report.run.kappa)
    ref = basis.potential(tracker.kappa_ref)
    a, b = basis.interval
    xs = np.linspace(a, b, 41)
    ys = np.linspace(-4.0, 4.0, 41)
    c = basis.channels[0]
    got = final.evaluate(xs, ys)
    want = ref.evaluate(xs, ys)
    # channel value is tr(sigma_c V) / 2
    pick = lambda M: 0.5 * np.einsum("xyab,ba->xy", M, sb.PAULI[c]).real
    got, want = pick(got), pick(want)
    with open(paths["grid"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "reconstructed", "reference"])
        for i, x in enumerate(xs):
            for j, y in enumerate(ys):
                w.writerow([repr(float(x)), repr(float(y)), repr(float(got[i, j])), repr(float(want[i, j]))])
    return paths
