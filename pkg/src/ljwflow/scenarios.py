"""Built-in diffusion scenarios.

Each scenario couples a manifold, a (possibly degenerate) diffusion
coefficient, optional drift, closed-form vectorized closures for the
induced geometry, registered path functionals with gradient oracles,
and reference values used by the command-line checks.

Closed-form closures are validated on first build against the generic
numerical backends on quasirandom probe points; the coefficient rank is
checked to be constant at the same time.  A failed validation aborts
the build, so a successfully built system is safe to trust downstream.
"""
from __future__ import annotations

import difflib
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .connection import (ConnectionOracle, DiffusionSystem,
                         constant_rank_check, require_injective)
from .errors import NotFoundError, PreconditionError
from .flow import FieldPack, generic_pack, make_transport
from .geometry import VectorField, flat_torus, halton_points, unit_sphere
from .harness import CylindricalFunctional
from .noise import CameronMartinPath, linear_direction

E_HALF = math.exp(-0.5)


def _suggest(name: str, options) -> str:
    close = difflib.get_close_matches(name, list(options), n=1)
    return f"; did you mean {close[0]!r}?" if close else ""


# ---------------------------------------------------------------------------
# closed-form field packs


def _flat_pack(sys: DiffusionSystem, column, drift_const=None) -> FieldPack:
    """Constant coefficient on a flat torus: everything curvature-like
    vanishes and the retraction is the periodic wrap."""
    man = sys.manifold
    N, m = man.ambient_dim, sys.noise_dim
    Xc = np.asarray(column, dtype=float).reshape(N, m)
    eye = np.eye(N)
    Ac = None if drift_const is None else np.asarray(drift_const, float)

    def frame(x):
        return eye.copy()

    def coeff_apply(x, b):
        return b @ Xc.T

    def coeff_dir(x, V, b):
        return np.zeros_like(V)

    def e_apply(x, b):
        return b

    def retract(z):
        return man.wrap(z)

    def dretract_cols(z, V):
        return V

    def project_cols(x, V):
        return V

    def zeros_cols(x, V):
        return np.zeros_like(V)

    def nabla_coeff_cols(x, b, V):
        return np.zeros_like(V)

    def semiconn_cols(x, w, V):
        return np.zeros_like(V)

    def membership_ok(x):
        return np.atleast_1d(man.membership(x, man.membership_tol))

    drift = drift_dir = nabla_drift = None
    if Ac is not None:
        def drift(x):
            return np.broadcast_to(Ac, x.shape)

        def drift_dir(x, V):
            return np.zeros_like(V)

        def nabla_drift(x, V):
            return np.zeros_like(V)

    return FieldPack(
        label=sys.scenario_id, ambient_dim=N, noise_dim=m, frame_dim=N,
        frame=frame, coeff_apply=coeff_apply, coeff_dir=coeff_dir,
        e_apply=e_apply, retract=retract, dretract_cols=dretract_cols,
        project_cols=project_cols,
        transport_cols=make_transport(project_cols),
        ricci_cols=zeros_cols, nabla_coeff_cols=nabla_coeff_cols,
        distance=man.distance, membership_ok=membership_ok,
        drift=drift, drift_dir=drift_dir, nabla_drift_cols=nabla_drift,
        semiconn_cols=semiconn_cols, lc_connector_cols=semiconn_cols)


def _sphere_pack(sys: DiffusionSystem, c: float = 0.0,
                 a=None) -> FieldPack:
    """Tangent-projection coefficient on the unit 2-sphere, optionally
    with the projected constant drift c * P(x) a.  The induced geometry
    is the round one: the connection is Levi-Civita and the curvature
    action on tangent vectors is the identity."""
    man = sys.manifold
    av = None if a is None else np.asarray(a, dtype=float)

    def dot(x, b):
        return np.einsum("bi,bi->b", x, b)

    def frame(x):
        return man.tangent_basis(x)

    def coeff_apply(x, b):
        return b - dot(x, b)[:, None] * x

    def coeff_dir(x, V, b):
        bv = np.einsum("bi,bik->bk", b, V)
        return -bv[:, None, :] * x[:, :, None] \
            - dot(x, b)[:, None, None] * V

    def retract(z):
        return z / np.linalg.norm(z, axis=1)[:, None]

    def dretract_cols(z, V):
        nz = np.linalg.norm(z, axis=1)
        zh = z / nz[:, None]
        coef = np.einsum("bi,bik->bk", zh, V)
        return (V - coef[:, None, :] * zh[:, :, None]) / nz[:, None, None]

    def project_cols(x, V):
        coef = np.einsum("bi,bik->bk", x, V)
        return V - coef[:, None, :] * x[:, :, None]

    def ricci_cols(x, V):
        return project_cols(x, V)

    def nabla_coeff_cols(x, b, V):
        return -dot(x, b)[:, None, None] * project_cols(x, V)

    def semiconn_cols(x, w, V):
        # on tangent arguments this equals the metric connector, so the
        # pack aliases lc_connector_cols to it
        wv = np.einsum("bi,bik->bk", w, V)
        return wv[:, None, :] * x[:, :, None]

    def membership_ok(x):
        return np.atleast_1d(man.membership(x, man.membership_tol))

    drift = drift_dir = nabla_drift = None
    if c != 0.0:
        def drift(x):
            return c * (av[None] - np.einsum("bi,i->b", x,
                                             av)[:, None] * x)

        def drift_dir(x, V):
            axv = np.einsum("i,bik->bk", av, V)
            ax = np.einsum("bi,i->b", x, av)
            return c * (-axv[:, None, :] * x[:, :, None]
                        - ax[:, None, None] * V)

        def nabla_drift(x, V):
            ax = np.einsum("bi,i->b", x, av)
            return -c * ax[:, None, None] * project_cols(x, V)

    return FieldPack(
        label=sys.scenario_id, ambient_dim=3, noise_dim=3, frame_dim=2,
        frame=frame, coeff_apply=coeff_apply, coeff_dir=coeff_dir,
        e_apply=coeff_apply, retract=retract, dretract_cols=dretract_cols,
        project_cols=project_cols,
        transport_cols=make_transport(project_cols),
        ricci_cols=ricci_cols, nabla_coeff_cols=nabla_coeff_cols,
        distance=man.distance, membership_ok=membership_ok,
        drift=drift, drift_dir=drift_dir, nabla_drift_cols=nabla_drift,
        semiconn_cols=semiconn_cols, lc_connector_cols=semiconn_cols)


# ---------------------------------------------------------------------------
# pack validation against the generic numerical backends


def _dev(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def validate_pack(sys: DiffusionSystem, pack: FieldPack,
                  probe_count: int = 6,
                  ricci_probes: int = 2) -> dict:
    """Compare every closed-form closure against the generic backends
    on quasirandom probes.  Returns the per-field worst deviations;
    raises PreconditionError when any exceeds its tolerance."""
    ref = generic_pack(sys)
    man = sys.manifold
    xs = halton_points(man, probe_count)
    rng = np.random.default_rng(71)
    B, N, m = xs.shape[0], man.ambient_dim, sys.noise_dim
    b = rng.normal(size=(B, m))
    V = ref.project_cols(xs, rng.normal(size=(B, N, 2)))
    tv = ref.project_cols(xs, rng.normal(size=(B, N, 1)))[:, :, 0]
    z = xs + 0.25 * tv
    w = pack.coeff_apply(xs, b)  # directions inside the coefficient image

    tols = {"coeff_apply": 1e-10, "coeff_dir": 1e-6, "e_apply": 1e-7,
            "retract": 1e-10, "dretract_cols": 1e-8, "project_cols": 1e-10,
            "transport_cols": 1e-8, "nabla_coeff_cols": 1e-6,
            "semiconn_cols": 1e-6, "lc_connector_cols": 1e-6,
            "ricci_cols": 2e-4, "drift": 1e-10,
            "drift_dir": 1e-6, "nabla_drift_cols": 1e-6}
    devs = {
        "coeff_apply": _dev(pack.coeff_apply(xs, b), ref.coeff_apply(xs, b)),
        "coeff_dir": _dev(pack.coeff_dir(xs, V, b), ref.coeff_dir(xs, V, b)),
        "e_apply": _dev(pack.e_apply(xs, b), ref.e_apply(xs, b)),
        "retract": _dev(pack.retract(z), ref.retract(z)),
        "dretract_cols": _dev(pack.dretract_cols(z, V),
                              ref.dretract_cols(z, V)),
        "project_cols": _dev(pack.project_cols(xs, V),
                             ref.project_cols(xs, V)),
        "transport_cols": _dev(pack.transport_cols(xs, V),
                               ref.transport_cols(xs, V)),
        "nabla_coeff_cols": _dev(pack.nabla_coeff_cols(xs, b, V),
                                 ref.nabla_coeff_cols(xs, b, V)),
        "semiconn_cols": _dev(pack.semiconn_cols(xs, w, V),
                              ref.semiconn_cols(xs, w, V)),
        "lc_connector_cols": _dev(pack.lc_connector_cols(xs, w, V),
                                  ref.lc_connector_cols(xs, w, V)),
        "ricci_cols": _dev(pack.ricci_cols(xs[:ricci_probes],
                                           V[:ricci_probes]),
                           ref.ricci_cols(xs[:ricci_probes],
                                          V[:ricci_probes])),
    }
    if (pack.drift is None) != (ref.drift is None):
        raise PreconditionError(
            f"{sys.scenario_id!r}: drift closure presence mismatch")
    if pack.drift is not None:
        devs["drift"] = _dev(pack.drift(xs), ref.drift(xs))
        devs["drift_dir"] = _dev(pack.drift_dir(xs, V),
                                 ref.drift_dir(xs, V))
        devs["nabla_drift_cols"] = _dev(pack.nabla_drift_cols(xs, V),
                                        ref.nabla_drift_cols(xs, V))
    bad = {k: v for k, v in devs.items() if v > tols[k]}
    if bad:
        raise PreconditionError(
            f"closed-form closures of {sys.scenario_id!r} deviate from "
            f"the numerical backends: {bad}")
    return devs


# ---------------------------------------------------------------------------
# registered functionals


def _functional(times, value, gradient, q, name):
    return CylindricalFunctional(times=tuple(float(t) for t in times),
                                 value=value, gradient=gradient,
                                 num_points=q, name=name)


def _circle_functionals(T: float) -> dict:
    def sin_val(xs):
        return np.sin(xs[:, 0, 0, 0])

    def sin_grad(xs):
        g = np.zeros_like(xs)
        g[:, 0, 0, 0] = np.cos(xs[:, 0, 0, 0])
        return g

    def cos_val(xs):
        return np.cos(xs[:, 0, 0, 0])

    def cos_grad(xs):
        g = np.zeros_like(xs)
        g[:, 0, 0, 0] = -np.sin(xs[:, 0, 0, 0])
        return g

    def two_val(xs):
        return np.sin(xs[:, 0, 0, 0]) * np.cos(xs[:, 1, 0, 0])

    def two_grad(xs):
        g = np.zeros_like(xs)
        g[:, 0, 0, 0] = np.cos(xs[:, 0, 0, 0]) * np.cos(xs[:, 1, 0, 0])
        g[:, 1, 0, 0] = -np.sin(xs[:, 0, 0, 0]) * np.sin(xs[:, 1, 0, 0])
        return g

    def pair_val(xs):
        return np.sin(xs[:, 0, 0, 0]) * np.cos(xs[:, 0, 1, 0])

    def pair_grad(xs):
        g = np.zeros_like(xs)
        g[:, 0, 0, 0] = np.cos(xs[:, 0, 0, 0]) * np.cos(xs[:, 0, 1, 0])
        g[:, 0, 1, 0] = -np.sin(xs[:, 0, 0, 0]) * np.sin(xs[:, 0, 1, 0])
        return g

    return {
        "sin-final": _functional((T,), sin_val, sin_grad, 1, "sin-final"),
        "cos-final": _functional((T,), cos_val, cos_grad, 1, "cos-final"),
        "two-time": _functional((0.5 * T, T), two_val, two_grad, 1,
                                "two-time"),
        "pair-product": _functional((T,), pair_val, pair_grad, 2,
                                    "pair-product"),
    }


def _torus_functionals(T: float) -> dict:
    def s1_val(xs):
        return np.sin(xs[:, 0, 0, 0])

    def s1_grad(xs):
        g = np.zeros_like(xs)
        g[:, 0, 0, 0] = np.cos(xs[:, 0, 0, 0])
        return g

    def s2_val(xs):
        return np.sin(xs[:, 0, 0, 1])

    def s2_grad(xs):
        g = np.zeros_like(xs)
        g[:, 0, 0, 1] = np.cos(xs[:, 0, 0, 1])
        return g

    def two_val(xs):
        return np.sin(xs[:, 0, 0, 0]) * np.cos(xs[:, 1, 0, 0]
                                               + xs[:, 1, 0, 1])

    def two_grad(xs):
        g = np.zeros_like(xs)
        s = np.sin(xs[:, 0, 0, 0])
        cc = np.cos(xs[:, 1, 0, 0] + xs[:, 1, 0, 1])
        ss = -np.sin(xs[:, 1, 0, 0] + xs[:, 1, 0, 1])
        g[:, 0, 0, 0] = np.cos(xs[:, 0, 0, 0]) * cc
        g[:, 1, 0, 0] = s * ss
        g[:, 1, 0, 1] = s * ss
        return g

    def pair_val(xs):
        return np.sin(xs[:, 0, 0, 0] + xs[:, 0, 1, 1])

    def pair_grad(xs):
        g = np.zeros_like(xs)
        c = np.cos(xs[:, 0, 0, 0] + xs[:, 0, 1, 1])
        g[:, 0, 0, 0] = c
        g[:, 0, 1, 1] = c
        return g

    return {
        "sin-first": _functional((T,), s1_val, s1_grad, 1, "sin-first"),
        "sin-transverse": _functional((T,), s2_val, s2_grad, 1,
                                      "sin-transverse"),
        "two-time": _functional((0.5 * T, T), two_val, two_grad, 1,
                                "two-time"),
        "pair-mixed": _functional((T,), pair_val, pair_grad, 2,
                                  "pair-mixed"),
    }


def _sphere_functionals(T: float) -> dict:
    e1 = np.array([1.0, 0.0, 0.0])
    e3 = np.array([0.0, 0.0, 1.0])

    def height_val(xs):
        return np.einsum("bi,i->b", xs[:, 0, 0], e3)

    def height_grad(xs):
        g = np.zeros_like(xs)
        g[:, 0, 0] = e3
        return g

    def window_val(xs):
        return np.sin(np.einsum("bi,i->b", xs[:, 0, 0], e1))

    def window_grad(xs):
        g = np.zeros_like(xs)
        c = np.cos(np.einsum("bi,i->b", xs[:, 0, 0], e1))
        g[:, 0, 0] = c[:, None] * e1[None]
        return g

    def two_val(xs):
        return np.einsum("bi,bi->b", xs[:, 0, 0], xs[:, 1, 0])

    def two_grad(xs):
        g = np.zeros_like(xs)
        g[:, 0, 0] = xs[:, 1, 0]
        g[:, 1, 0] = xs[:, 0, 0]
        return g

    def pair_val(xs):
        return np.einsum("bi,bi->b", xs[:, 0, 0], xs[:, 0, 1])

    def pair_grad(xs):
        g = np.zeros_like(xs)
        g[:, 0, 0] = xs[:, 0, 1]
        g[:, 0, 1] = xs[:, 0, 0]
        return g

    return {
        "height": _functional((T,), height_val, height_grad, 1, "height"),
        "window": _functional((T,), window_val, window_grad, 1, "window"),
        "two-time": _functional((0.5 * T, T), two_val, two_grad, 1,
                                "two-time"),
        "pair-inner": _functional((T,), pair_val, pair_grad, 2,
                                  "pair-inner"),
    }


# ---------------------------------------------------------------------------
# conditional-check data


def _circle_conditional():
    v0 = np.array([1.0])

    def g(x):
        return 1.0 + 0.5 * np.sin(x[:, 0])

    def u(x):
        return np.ones_like(x)

    return v0, g, u


def _torus_conditional():
    v0 = np.array([0.6, 0.8])
    uc = np.array([0.3, 0.9])

    def g(x):
        return 1.0 + 0.5 * np.sin(x[:, 0])

    def u(x):
        return np.broadcast_to(uc, x.shape)

    return v0, g, u


def _sphere_conditional():
    v0 = np.array([1.0, 0.0, 0.0])
    a = np.array([1.0, 0.0, 0.0])
    b = np.array([0.0, 1.0, 0.0])

    def g(x):
        return 1.0 + 0.5 * (x @ b)

    def u(x):
        return a[None] - (x @ a)[:, None] * x

    return v0, g, u


# ---------------------------------------------------------------------------
# the registry


@dataclass(frozen=True)
class Scenario:
    """Descriptor of a built-in system and its registered check data."""

    scenario_id: str
    title: str
    manifold_name: str
    ambient_dim: int
    noise_dim: int
    rank: int
    has_drift: bool
    system_factory: Callable[[], DiffusionSystem]
    pack_factory: Callable[[DiffusionSystem], FieldPack]
    functional_factory: Callable[[float], dict]
    conditional_factory: Callable[[], tuple]
    x0: tuple
    direction: tuple
    tau: float
    default_functional: str
    eq5_functional: str
    eq5_points: tuple
    closed_forms: dict = field(default_factory=dict)

    @property
    def functional_names(self) -> tuple:
        return tuple(sorted(self.functional_factory(1.0).keys()))


def _circle_system() -> DiffusionSystem:
    man = flat_torus(1, "circle")
    return DiffusionSystem(manifold=man, noise_dim=1,
                           coefficient=lambda x: np.ones((1, 1)),
                           scenario_id="circle-full")


def _torus_deg_system() -> DiffusionSystem:
    man = flat_torus(2, "torus2")
    col = np.array([[1.0], [0.0]])
    return DiffusionSystem(manifold=man, noise_dim=1,
                           coefficient=lambda x: col.copy(),
                           scenario_id="torus2-degenerate")


def _torus_drift_system() -> DiffusionSystem:
    man = flat_torus(2, "torus2")
    col = np.array([[1.0], [0.0]])
    drift = VectorField(lambda x: np.array([0.0, 1.0]),
                        derivative=lambda x, v: np.zeros(2),
                        name="transverse-drift")
    return DiffusionSystem(manifold=man, noise_dim=1,
                           coefficient=lambda x: col.copy(), drift=drift,
                           scenario_id="torus2-transverse-drift")


def _sphere_system() -> DiffusionSystem:
    man = unit_sphere()
    return DiffusionSystem(manifold=man, noise_dim=3,
                           coefficient=lambda x: np.eye(3) - np.outer(x, x),
                           scenario_id="sphere2-gradient")


DRIFT_SCALE = 0.4
DRIFT_AXIS = np.array([1.0, 0.0, 0.0])


def _sphere_drift_system() -> DiffusionSystem:
    man = unit_sphere()
    c, a = DRIFT_SCALE, DRIFT_AXIS
    drift = VectorField(
        lambda x: c * (a - (a @ x) * x),
        derivative=lambda x, v: c * (-(a @ v) * x - (a @ x) * v),
        name="projected-axis-drift")
    return DiffusionSystem(manifold=man, noise_dim=3,
                           coefficient=lambda x: np.eye(3) - np.outer(x, x),
                           drift=drift, scenario_id="sphere2-drift")


_REGISTRY: dict[str, Scenario] = {}


def _register(s: Scenario):
    _REGISTRY[s.scenario_id] = s


_register(Scenario(
    scenario_id="circle-full", title="Additive motion on the circle",
    manifold_name="circle", ambient_dim=1, noise_dim=1, rank=1,
    has_drift=False, system_factory=_circle_system,
    pack_factory=lambda sys: _flat_pack(sys, [1.0]),
    functional_factory=_circle_functionals,
    conditional_factory=_circle_conditional,
    x0=(0.0,), direction=(1.0,), tau=1.0,
    default_functional="sin-final", eq5_functional="pair-product",
    eq5_points=((0.0,), (1.0,)),
    closed_forms={
        "eq4": {"functional": "sin-final", "value": E_HALF},
        "girsanov": {"functional": "sin-final", "tau": 1.0,
                     "value": E_HALF * math.sin(1.0)},
    }))

_register(Scenario(
    scenario_id="torus2-degenerate",
    title="Rank-one constant coefficient on the 2-torus",
    manifold_name="torus2", ambient_dim=2, noise_dim=1, rank=1,
    has_drift=False, system_factory=_torus_deg_system,
    pack_factory=lambda sys: _flat_pack(sys, [[1.0], [0.0]]),
    functional_factory=_torus_functionals,
    conditional_factory=_torus_conditional,
    x0=(0.7, 1.3), direction=(1.0,), tau=0.5,
    default_functional="sin-first", eq5_functional="pair-mixed",
    eq5_points=((0.7, 1.3), (2.0, 0.4)),
    closed_forms={
        "eq4": {"functional": "sin-first", "value": E_HALF * math.cos(0.7)},
        "girsanov": {"functional": "sin-first", "tau": 0.5,
                     "value": E_HALF * math.sin(1.2)},
    }))

_register(Scenario(
    scenario_id="torus2-transverse-drift",
    title="Rank-one coefficient with drift outside its image",
    manifold_name="torus2", ambient_dim=2, noise_dim=1, rank=1,
    has_drift=True, system_factory=_torus_drift_system,
    pack_factory=lambda sys: _flat_pack(sys, [[1.0], [0.0]],
                                        drift_const=[0.0, 1.0]),
    functional_factory=_torus_functionals,
    conditional_factory=_torus_conditional,
    x0=(0.7, 1.3), direction=(1.0,), tau=0.5,
    default_functional="sin-first", eq5_functional="pair-mixed",
    eq5_points=((0.7, 1.3), (2.0, 0.4)),
    closed_forms={
        "eq4": {"functional": "sin-first", "value": E_HALF * math.cos(0.7)},
        "girsanov": {"functional": "sin-first", "tau": 0.5,
                     "value": E_HALF * math.sin(1.2)},
    }))

_register(Scenario(
    scenario_id="sphere2-gradient",
    title="Tangent-projection coefficient on the 2-sphere",
    manifold_name="sphere2", ambient_dim=3, noise_dim=3, rank=2,
    has_drift=False, system_factory=_sphere_system,
    pack_factory=lambda sys: _sphere_pack(sys),
    functional_factory=_sphere_functionals,
    conditional_factory=_sphere_conditional,
    x0=(0.0, 0.0, 1.0), direction=(1.0, 0.0, 0.0), tau=0.5,
    default_functional="height", eq5_functional="pair-inner",
    eq5_points=((0.0, 0.0, 1.0), (0.0, 0.0, -1.0)),
    closed_forms={
        "semigroup": {"functional": "height", "value": math.exp(-1.0)},
    }))

_register(Scenario(
    scenario_id="sphere2-drift",
    title="Tangent-projection coefficient with projected axis drift",
    manifold_name="sphere2", ambient_dim=3, noise_dim=3, rank=2,
    has_drift=True, system_factory=_sphere_drift_system,
    pack_factory=lambda sys: _sphere_pack(sys, c=DRIFT_SCALE, a=DRIFT_AXIS),
    functional_factory=_sphere_functionals,
    conditional_factory=_sphere_conditional,
    x0=(0.0, 0.0, 1.0), direction=(1.0, 0.0, 0.0), tau=0.5,
    default_functional="height", eq5_functional="pair-inner",
    eq5_points=((0.0, 0.0, 1.0), (0.0, 0.0, -1.0)),
    closed_forms={}))

SCENARIO_ORDER = ("circle-full", "torus2-degenerate",
                  "torus2-transverse-drift", "sphere2-gradient",
                  "sphere2-drift")


def scenario_ids() -> tuple:
    return SCENARIO_ORDER


def get_scenario(scenario_id: str) -> Scenario:
    try:
        return _REGISTRY[scenario_id]
    except KeyError:
        raise NotFoundError(
            f"unknown scenario {scenario_id!r}"
            f"{_suggest(scenario_id, _REGISTRY)}") from None


_SYSTEMS: dict[str, DiffusionSystem] = {}
_VALIDATION: dict[str, dict] = {}


def build_system(scenario_id: str, validate: bool = True) -> DiffusionSystem:
    """Build (or fetch the cached) system for a scenario.  On first
    build the closed-form pack is validated against the numerical
    backends and the coefficient rank is checked on probe points."""
    if scenario_id in _SYSTEMS:
        return _SYSTEMS[scenario_id]
    sc = get_scenario(scenario_id)
    sys = sc.system_factory()
    pack = sc.pack_factory(sys)
    if validate:
        devs = validate_pack(sys, pack)
        probes = halton_points(sys.manifold, 256)
        rank = constant_rank_check(sys, probes)
        if rank != sc.rank:
            raise PreconditionError(
                f"{scenario_id!r}: observed rank {rank}, registered "
                f"{sc.rank}")
        require_injective(sys, probes[:32])
        _VALIDATION[scenario_id] = devs
    sys.pack = pack
    _SYSTEMS[scenario_id] = sys
    return sys


def validation_report(scenario_id: str) -> dict:
    build_system(scenario_id)
    return dict(_VALIDATION.get(scenario_id, {}))


_VALIDATED_FUNCTIONALS: set = set()


def make_functional(scenario_id: str, name: str,
                    T: float) -> CylindricalFunctional:
    """Registered functional for a scenario at horizon T, with its
    gradient oracle checked against finite differences once per
    (scenario, name, horizon)."""
    sc = get_scenario(scenario_id)
    table = sc.functional_factory(float(T))
    try:
        F = table[name]
    except KeyError:
        raise NotFoundError(
            f"scenario {scenario_id!r} has no functional {name!r}"
            f"{_suggest(name, table)}") from None
    key = (scenario_id, name, float(T))
    if key not in _VALIDATED_FUNCTIONALS:
        man = build_system(scenario_id).manifold
        pts = halton_points(man, 2 * F.num_times * F.num_points + 2)
        configs = pts[:2 * F.num_times * F.num_points].reshape(
            2, F.num_times, F.num_points, man.ambient_dim)
        F.validate_gradient(man, configs)
        _VALIDATED_FUNCTIONALS.add(key)
    return F


def default_direction(scenario_id: str) -> CameronMartinPath:
    sc = get_scenario(scenario_id)
    return linear_direction(np.asarray(sc.direction, dtype=float))


def start_point(scenario_id: str) -> np.ndarray:
    return np.asarray(get_scenario(scenario_id).x0, dtype=float)


def eq5_start_points(scenario_id: str) -> np.ndarray:
    return np.asarray(get_scenario(scenario_id).eq5_points, dtype=float)


def conditional_data(scenario_id: str) -> tuple:
    """(v0, g, u) for the conditional-expectation check."""
    return get_scenario(scenario_id).conditional_factory()


def closed_form(scenario_id: str, check: str) -> dict | None:
    cf = get_scenario(scenario_id).closed_forms.get(check)
    return dict(cf) if cf else None


def list_scenarios() -> list:
    """Catalog of scenario descriptors, in fixed registry order."""
    out = []
    for sid in SCENARIO_ORDER:
        sc = _REGISTRY[sid]
        out.append({
            "id": sc.scenario_id,
            "title": sc.title,
            "manifold": sc.manifold_name,
            "ambient_dim": sc.ambient_dim,
            "noise_dim": sc.noise_dim,
            "rank": sc.rank,
            "drift": sc.has_drift,
            "default_functional": sc.default_functional,
            "functionals": list(sc.functional_names),
            "closed_forms": sorted(sc.closed_forms),
            "default_tau": sc.tau,
            "x0": list(sc.x0),
        })
    return out
