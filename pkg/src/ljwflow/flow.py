"""Time-stepped simulation of manifold diffusions and their flows.

Scheme summary, shared by every operation in this module:

- position: Stratonovich Heun; the predictor leaves the manifold, the
  averaged corrector is pulled back by the retraction,
- derivative flow: the exact differential of that discrete one-step map
  (directional derivatives of the coefficient and drift along the
  current columns, then the retraction differential),
- filtered flow: noise terms averaged over the two step endpoints,
  curvature and drift terms at the left endpoint, then norm-preserving
  discrete parallel transport; the semi-connection variant enters only
  through the tensorial difference of its connector from the metric one.

The batched engine below is the single source of truth; per-path
wrappers run it with batch size one and keep histories.  All scenario
math enters through a FieldPack of vectorized closures; a generic pack
built from any DiffusionSystem provides the slow reference versions.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .connection import (ConnectionOracle, DiffusionSystem,
                         require_drift_in_image)
from .errors import (GridError, OffManifoldError, PreconditionError,
                     UsageError)
from .geometry import directional_derivative
from .noise import CameronMartinPath, DrivingNoise, girsanov_log_weight

FILTER_VARIANTS = ("eq7", "eq8")


def _gram_solve(M: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Least-squares coordinates of w in the columns of M: (B,N,n),(B,N)
    -> (B,n).  Columns must be linearly independent."""
    G = np.einsum("bik,bil->bkl", M, M)
    r = np.einsum("bik,bi->bk", M, w)
    try:
        return np.linalg.solve(G, r[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise PreconditionError(
            "derivative-flow columns became linearly dependent; the "
            "flow inverse does not exist at this resolution") from exc


def make_transport(project_cols: Callable) -> Callable:
    """Norm-preserving discrete parallel transport from a columnwise
    tangent projector: project, then rescale each column."""

    def transport(x, V):
        W = project_cols(x, V)
        n0 = np.linalg.norm(V, axis=1)
        n1 = np.linalg.norm(W, axis=1)
        s = np.where(n1 > 1e-300, n0 / np.maximum(n1, 1e-300), 0.0)
        return W * s[:, None, :]

    return transport


@dataclass
class FieldPack:
    """Vectorized closures the engine steps with.

    Shapes: points x (B, N), noise vectors b (B, m), column stacks
    V (B, N, K).  ``coeff_dir(x, V, b)`` returns the directional
    derivative of the coefficient along each column, applied to b;
    ``nabla_coeff_cols``/``nabla_drift_cols`` are the tangent-projected
    (metric-connection) versions; ``semiconn_cols(x, w, V)`` applies the
    adjoint semi-connection connector with direction w in I(X), and
    ``lc_connector_cols(x, w, V)`` the metric (projection) connector,
    so their difference is tensorial.
    """

    label: str
    ambient_dim: int
    noise_dim: int
    frame_dim: int
    frame: Callable[[np.ndarray], np.ndarray]
    coeff_apply: Callable
    coeff_dir: Callable
    e_apply: Callable
    retract: Callable
    dretract_cols: Callable
    project_cols: Callable
    transport_cols: Callable
    ricci_cols: Callable
    nabla_coeff_cols: Callable
    distance: Callable
    membership_ok: Callable
    drift: Callable | None = None
    drift_dir: Callable | None = None
    nabla_drift_cols: Callable | None = None
    semiconn_cols: Callable | None = None
    lc_connector_cols: Callable | None = None


def generic_pack(sys: DiffusionSystem,
                 oracle: ConnectionOracle | None = None) -> FieldPack:
    """Reference FieldPack for an arbitrary system: row loops over the
    pointwise backends.  Slow; used for validation and as the fallback
    for systems without registered closed forms.

    Assumes coefficient and drift evaluate in an ambient neighborhood
    of M (any smooth extension; only its on-manifold 1-jet is used).
    """
    man = sys.manifold
    orc = oracle if oracle is not None else ConnectionOracle(sys)
    h0 = float(np.finfo(float).eps ** (1.0 / 3.0))

    def coeff_apply(x, b):
        return np.stack([sys.coeff(x[i]) @ b[i] for i in range(x.shape[0])])

    def coeff_dir(x, V, b):
        out = np.empty_like(V)
        for i in range(x.shape[0]):
            for c in range(V.shape[2]):
                v = V[i, :, c]
                nv = float(np.linalg.norm(v))
                if nv == 0.0:
                    out[i, :, c] = 0.0
                    continue
                h = h0 * max(1.0, float(np.linalg.norm(x[i]))) / nv
                out[i, :, c] = (sys.coeff(x[i] + h * v)
                                - sys.coeff(x[i] - h * v)) @ b[i] / (2.0 * h)
        return out

    def e_apply(x, b):
        return np.stack([orc.sub(x[i]).e @ b[i] for i in range(x.shape[0])])

    def retract(z):
        return np.stack([man.retract_point(z[i]) for i in range(z.shape[0])])

    def dretract_cols(z, V):
        out = np.empty_like(V)
        for c in range(V.shape[2]):
            for i in range(z.shape[0]):
                out[i, :, c] = man.dretract(z[i], V[i, :, c])
        return out

    def project_cols(x, V):
        return np.stack([man.projector(x[i]) @ V[i]
                         for i in range(x.shape[0])])

    def ricci_cols(x, V):
        return np.stack([orc.ricci_matrix(x[i]) @ V[i]
                         for i in range(x.shape[0])])

    def nabla_coeff_cols(x, b, V):
        return project_cols(x, coeff_dir(x, V, b))

    def semiconn_cols(x, w, V):
        out = np.empty_like(V)
        for i in range(x.shape[0]):
            for c in range(V.shape[2]):
                out[i, :, c] = orc.semi_connector(x[i], w[i], V[i, :, c])
        return out

    def lc_connector_cols(x, w, V):
        # metric connector of the embedded metric: -(D_w P)(v), with the
        # projector differentiated along the retraction curve through x
        out = np.empty_like(V)
        for i in range(x.shape[0]):
            nw = float(np.linalg.norm(w[i]))
            if nw == 0.0:
                out[i] = 0.0
                continue
            h = h0 * max(1.0, float(np.linalg.norm(x[i]))) / nw
            Pp = man.projector(man.retract_point(x[i] + h * w[i]))
            Pm = man.projector(man.retract_point(x[i] - h * w[i]))
            out[i] = -((Pp - Pm) @ V[i]) / (2.0 * h)
        return out

    def membership_ok(x):
        return np.atleast_1d(man.membership(x, man.membership_tol))

    drift = drift_dir = nabla_drift_cols = None
    if sys.drift is not None:
        A = sys.drift

        def drift(x):
            return np.stack([A(x[i]) for i in range(x.shape[0])])

        def _dA(xi, v):
            if A.derivative is not None:
                return A.derivative(xi, v)
            return directional_derivative(man, A, xi, v)

        def drift_dir(x, V):
            out = np.empty_like(V)
            for i in range(x.shape[0]):
                for c in range(V.shape[2]):
                    out[i, :, c] = _dA(x[i], V[i, :, c])
            return out

        def nabla_drift_cols(x, V):
            out = drift_dir(x, V)
            return project_cols(x, out)

    return FieldPack(
        label=sys.scenario_id, ambient_dim=man.ambient_dim,
        noise_dim=sys.noise_dim, frame_dim=man.intrinsic_dim,
        frame=man.tangent_basis, coeff_apply=coeff_apply,
        coeff_dir=coeff_dir, e_apply=e_apply, retract=retract,
        dretract_cols=dretract_cols, project_cols=project_cols,
        transport_cols=make_transport(project_cols), ricci_cols=ricci_cols,
        nabla_coeff_cols=nabla_coeff_cols, distance=man.distance,
        membership_ok=membership_ok, drift=drift, drift_dir=drift_dir,
        nabla_drift_cols=nabla_drift_cols, semiconn_cols=semiconn_cols,
        lc_connector_cols=lc_connector_cols)


def resolve_pack(sys: DiffusionSystem) -> FieldPack:
    if sys.pack is None:
        sys.pack = generic_pack(sys)
    return sys.pack


# ---------------------------------------------------------------------------
# batched engine


def _w_step(pack: FieldPack, x, xn, mk, W, dt, variant):
    """One step of the filtered flow.  Consumes only the two path
    points and the filtered increment mk = e(x) dB, never raw noise."""
    DR = -0.5 * dt * pack.ricci_cols(x, W)
    if pack.nabla_drift_cols is not None:
        DR = DR + dt * pack.nabla_drift_cols(x, W)
    if variant == "eq8":
        N1 = pack.nabla_coeff_cols(x, mk, W)
        Wt = pack.transport_cols(xn, W + N1 + DR)
        N2 = pack.nabla_coeff_cols(xn, pack.e_apply(xn, mk), Wt)
        N2b = pack.transport_cols(x, N2)
        return pack.transport_cols(xn, W + 0.5 * (N1 + N2b) + DR)
    if pack.semiconn_cols is None or pack.lc_connector_cols is None:
        raise PreconditionError(
            f"pack {pack.label!r} has no semi-connection closures; "
            f"variant eq7 unavailable")
    # Transport along the step realizes the metric connector isometrically;
    # the semi-connection enters only through the tensorial difference
    # (metric minus semi).  Stepping with the raw semi-connector and then
    # projecting would transport twice at second order in the increment.
    d1 = pack.coeff_apply(x, mk)
    if pack.drift is not None:
        d1 = d1 + dt * pack.drift(x)
    D1 = pack.lc_connector_cols(x, d1, W) - pack.semiconn_cols(x, d1, W)
    Wt = pack.transport_cols(xn, W + D1 + DR)
    d2 = pack.coeff_apply(xn, mk)
    if pack.drift is not None:
        d2 = d2 + dt * pack.drift(xn)
    D2 = pack.lc_connector_cols(xn, d2, Wt) - pack.semiconn_cols(xn, d2, Wt)
    D2b = pack.project_cols(x, D2)
    return pack.transport_cols(xn, W + 0.5 * (D1 + D2b) + DR)


@dataclass
class SimResult:
    """Final state of a batched run, plus optional accumulators.

    snaps maps a node index to {"x", "VJ", "VW"} copies taken when the
    engine passed that node; histories are populated on request only.
    """

    x: np.ndarray
    E0: np.ndarray
    J: np.ndarray | None = None
    W: np.ndarray | None = None
    IJ: np.ndarray | None = None
    IW: np.ndarray | None = None
    ito_kB: np.ndarray | None = None
    ito_kM: np.ndarray | None = None
    snaps: dict = field(default_factory=dict)
    xs: np.ndarray | None = None
    Js: np.ndarray | None = None
    Ws: np.ndarray | None = None


def simulate_batch(pack: FieldPack, x0, incs, dt, *, want_J=False,
                   want_W=False, variant="eq8", kdot_steps=None,
                   snap_steps=(), record_x=False, record_J=False,
                   record_W=False, validate=True) -> SimResult:
    """Integrate a batch of paths driven by the rows of incs (B, L, m).

    All rows start at the single point x0.  When kdot_steps (L, m) is
    given, the running flow integrals I = int D^{-1} X kdot ds are
    accumulated trapezoidally for the derivative (IJ) and filtered (IW)
    flows, along with both pairing sums of kdot against the raw and the
    filtered increments.
    """
    incs = np.asarray(incs, dtype=float)
    if incs.ndim != 3:
        raise PreconditionError("increments must have shape (B, L, m)")
    B, L, m = incs.shape
    if m != pack.noise_dim:
        raise PreconditionError(
            f"noise dimension {m} does not match {pack.label!r} "
            f"(expects {pack.noise_dim})")
    if dt <= 0.0 or not np.isfinite(dt):
        raise GridError(f"invalid step size {dt!r}")
    if variant not in FILTER_VARIANTS:
        raise UsageError(f"unknown filtered-flow variant {variant!r}")

    x0 = np.asarray(x0, dtype=float)
    N = pack.ambient_dim
    if x0.shape != (N,):
        raise PreconditionError(f"x0 must be a single point in R^{N}")
    if validate and not bool(np.all(pack.membership_ok(x0[None]))):
        raise OffManifoldError(
            f"start point of {pack.label!r} fails the membership test")

    E0 = pack.frame(x0)
    n = E0.shape[1]
    x = np.broadcast_to(x0, (B, N)).copy()
    J = np.broadcast_to(E0, (B, N, n)).copy() if want_J else None
    W = np.broadcast_to(E0, (B, N, n)).copy() if want_W else None

    snap_steps = tuple(sorted(set(int(s) for s in snap_steps)))
    if snap_steps and (snap_steps[0] < 0 or snap_steps[-1] > L):
        raise GridError(f"snapshot nodes {snap_steps!r} outside 0..{L}")

    IJ = IW = ito_kB = ito_kM = None
    cJ = cW = None
    if kdot_steps is not None:
        kdot_steps = np.asarray(kdot_steps, dtype=float)
        if kdot_steps.shape != (L, m):
            raise GridError(
                f"slope grid {kdot_steps.shape} does not match ({L}, {m})")
        ito_kB = np.einsum("bkd,kd->b", incs, kdot_steps) if L else \
            np.zeros(B)
        ito_kM = np.zeros(B)
        if L:
            w0 = pack.coeff_apply(x, np.broadcast_to(kdot_steps[0], (B, m)))
            if want_J:
                IJ = np.zeros((B, n))
                cJ = _gram_solve(J, w0)
            if want_W:
                IW = np.zeros((B, n))
                cW = _gram_solve(W, w0)

    def _snap(node):
        rec = {"x": x.copy(), "VJ": None, "VW": None}
        if IJ is not None:
            rec["VJ"] = np.einsum("bik,bk->bi", J, IJ)
        if IW is not None:
            rec["VW"] = np.einsum("bik,bk->bi", W, IW)
        snaps[node] = rec

    snaps: dict = {}
    xs = Js = Ws = None
    if record_x:
        xs = np.empty((B, L + 1, N))
        xs[:, 0] = x
    if record_J and want_J:
        Js = np.empty((B, L + 1, N, n))
        Js[:, 0] = J
    if record_W and want_W:
        Ws = np.empty((B, L + 1, N, n))
        Ws[:, 0] = W
    if 0 in snap_steps:
        _snap(0)

    need_mk = want_W or kdot_steps is not None
    for s in range(L):
        dB = incs[:, s, :]
        mk = pack.e_apply(x, dB) if need_mk else None

        a1 = pack.coeff_apply(x, dB)
        if pack.drift is not None:
            a1 = a1 + dt * pack.drift(x)
        xt = x + a1
        a2 = pack.coeff_apply(xt, dB)
        if pack.drift is not None:
            a2 = a2 + dt * pack.drift(xt)
        z = x + 0.5 * (a1 + a2)
        xn = pack.retract(z)

        if want_J:
            g1 = pack.coeff_dir(x, J, dB)
            if pack.drift_dir is not None:
                g1 = g1 + dt * pack.drift_dir(x, J)
            Jt = J + g1
            g2 = pack.coeff_dir(xt, Jt, dB)
            if pack.drift_dir is not None:
                g2 = g2 + dt * pack.drift_dir(xt, Jt)
            J = pack.dretract_cols(z, J + 0.5 * (g1 + g2))
        if want_W:
            W = _w_step(pack, x, xn, mk, W, dt, variant)

        if kdot_steps is not None:
            ito_kM += mk @ kdot_steps[s]
            nxt = kdot_steps[min(s + 1, L - 1)]
            wv = pack.coeff_apply(xn, np.broadcast_to(nxt, (B, m)))
            if want_J:
                cn = _gram_solve(J, wv)
                IJ += 0.5 * dt * (cJ + cn)
                cJ = cn
            if want_W:
                cn = _gram_solve(W, wv)
                IW += 0.5 * dt * (cW + cn)
                cW = cn

        x = xn
        if xs is not None:
            xs[:, s + 1] = x
        if Js is not None:
            Js[:, s + 1] = J
        if Ws is not None:
            Ws[:, s + 1] = W
        if (s + 1) in snap_steps:
            _snap(s + 1)

    if validate and not bool(np.all(pack.membership_ok(x))):
        raise OffManifoldError(
            f"integration left the manifold in {pack.label!r}")
    return SimResult(x=x, E0=E0, J=J, W=W, IJ=IJ, IW=IW, ito_kB=ito_kB,
                     ito_kM=ito_kM, snaps=snaps, xs=xs, Js=Js, Ws=Ws)


# ---------------------------------------------------------------------------
# per-path types


@dataclass
class FlowPath:
    """One simulated path with its derivative flow.

    The derivative flow is stored in moving orthonormal frames: frames[j]
    spans the tangent space at points[j], D[j] maps frame coordinates at
    the start to frame coordinates at node j, and the ambient linear map
    is frames[j] @ D[j] @ frames[0].T.
    """

    system: DiffusionSystem
    noise: DrivingNoise
    points: np.ndarray          # (L+1, N)
    frames: np.ndarray          # (L+1, N, n)
    D: np.ndarray               # (L+1, n, n)
    Dinv: np.ndarray            # (L+1, n, n)

    @property
    def steps(self) -> int:
        return self.points.shape[0] - 1

    @property
    def dt(self) -> float:
        return self.noise.dt

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.noise.T, self.steps + 1)

    def push(self, j: int, v0: np.ndarray) -> np.ndarray:
        """Apply the derivative flow at node j to a start tangent v0."""
        c = self.frames[0].T @ np.asarray(v0, dtype=float)
        return self.frames[j] @ (self.D[j] @ c)

    def inverse_residual(self) -> float:
        """max_j |D_j Dinv_j - I|, scaled by the conditioning of D_j."""
        eye = np.eye(self.D.shape[1])
        worst = 0.0
        for j in range(self.D.shape[0]):
            cond = (np.linalg.norm(self.D[j], 2)
                    * np.linalg.norm(self.Dinv[j], 2))
            res = float(np.abs(self.D[j] @ self.Dinv[j] - eye).max())
            worst = max(worst, res / max(cond, 1.0))
        return worst


@dataclass
class FilteredFlow:
    """Filtered derivative flow along a FlowPath, in the same moving
    frames; ambient[j] is the ambient column map at node j."""

    path: FlowPath
    variant: str
    Wmat: np.ndarray            # (L+1, n, n)
    ambient: np.ndarray         # (L+1, N, n)

    def push(self, j: int, v0: np.ndarray) -> np.ndarray:
        c = self.path.frames[0].T @ np.asarray(v0, dtype=float)
        return self.ambient[j] @ c


def _moving_frames(pack: FieldPack, points: np.ndarray,
                   E0: np.ndarray) -> np.ndarray:
    """Transport the start frame along the path, one step at a time.

    Columnwise transport alone lets the columns lose orthogonality at
    second order per step, so each step re-orthonormalizes; the frames
    then span the exact tangent spaces and coordinate maps against them
    are isometries.
    """
    L = points.shape[0] - 1
    out = np.empty((L + 1,) + E0.shape)
    out[0] = E0
    cur = E0
    for j in range(L):
        moved = pack.transport_cols(points[j + 1][None], cur[None])[0]
        q, r = np.linalg.qr(moved)
        cur = q * np.sign(np.diagonal(r))[None, :]
        out[j + 1] = cur
    return out


def integrate_flow(sys: DiffusionSystem, x0, noise: DrivingNoise) -> FlowPath:
    """Simulate one path and its derivative flow from the given noise."""
    pack = resolve_pack(sys)
    if noise.dim != sys.noise_dim:
        raise PreconditionError(
            f"noise dimension {noise.dim} does not match the system "
            f"({sys.noise_dim})")
    res = simulate_batch(pack, x0, noise.dB[None], noise.dt, want_J=True,
                         record_x=True, record_J=True)
    points = res.xs[0]
    Js = res.Js[0]
    if not bool(np.all(pack.membership_ok(points))):
        raise OffManifoldError(
            f"path of {pack.label!r} violates membership along the way")
    frames = _moving_frames(pack, points, res.E0)
    D = np.einsum("jik,jil->jkl", frames, Js)
    try:
        Dinv = np.linalg.inv(D)
    except np.linalg.LinAlgError as exc:
        raise PreconditionError(
            "derivative flow is singular on this path") from exc
    return FlowPath(system=sys, noise=noise, points=points, frames=frames,
                    D=D, Dinv=Dinv)


def shifted_flow(sys: DiffusionSystem, x0, noise: DrivingNoise,
                 k: CameronMartinPath, tau: float) -> FlowPath:
    """Flow driven by the same noise shifted along k by tau."""
    if k.dim != noise.dim:
        raise PreconditionError("shift direction dimension mismatch")
    if tau == 0.0:
        return integrate_flow(sys, x0, noise)
    slopes = k.slope_steps(noise.steps, noise.T)
    shifted = replace(noise, dB=noise.dB + tau * noise.dt * slopes)
    return integrate_flow(sys, x0, shifted)


def girsanov_weight(noise: DrivingNoise, k: CameronMartinPath,
                    tau: float) -> float:
    """Relative density of the tau-shifted noise law on this path."""
    slopes = k.slope_steps(noise.steps, noise.T)
    return float(np.exp(girsanov_log_weight(tau, slopes, noise.dB,
                                            noise.dt)))


def antidevelopment_martingale_increments(sys: DiffusionSystem,
                                          path: FlowPath) -> np.ndarray:
    """Martingale increments of the path's anti-development: e(x_k) dB_k.

    These are the noise components measurable with respect to the path
    filtration; the kernel components of each dB_k are discarded.
    """
    pack = resolve_pack(sys)
    return pack.e_apply(path.points[:-1], path.noise.dB)


def filtered_derivative_flow(sys: DiffusionSystem, path: FlowPath,
                             variant: str = "eq8") -> FilteredFlow:
    """Integrate the filtered derivative flow along an existing path.

    By construction this consumes only the path points and the
    filtered increments from antidevelopment_martingale_increments,
    never the raw noise (the conditional-expectation firewall).
    """
    if variant not in FILTER_VARIANTS:
        raise UsageError(f"unknown filtered-flow variant {variant!r}")
    pack = resolve_pack(sys)
    if variant == "eq7" and sys.drift is not None:
        stride = max(1, path.steps // 16)
        require_drift_in_image(sys, path.points[::stride])
    m_incs = antidevelopment_martingale_increments(sys, path)
    dt = path.noise.dt
    E0 = path.frames[0]
    L = m_incs.shape[0]
    ambient = np.empty((L + 1,) + E0.shape)
    ambient[0] = E0
    W = E0[None].copy()
    for j in range(L):
        W = _w_step(pack, path.points[j][None], path.points[j + 1][None],
                    m_incs[j][None], W, dt, variant)
        ambient[j + 1] = W[0]
    Wmat = np.einsum("jik,jil->jkl", path.frames, ambient)
    return FilteredFlow(path=path, variant=variant, Wmat=Wmat,
                        ambient=ambient)


# ---------------------------------------------------------------------------
# perturbation of the initial condition and the composition property


def _reference_perturbation(sys: DiffusionSystem, x0, noise: DrivingNoise,
                            k: CameronMartinPath, tau: float):
    """Heun integration of the initial-condition perturbation, with the
    composed-argument coefficient evaluated by re-running the flow from
    the current perturbed point (exact composition semantics, O(L^2)).

    Returns (H nodes, composed nodes), the latter being the flow
    evaluated at the moving perturbed start.
    """
    pack = resolve_pack(sys)
    L, dt = noise.steps, noise.dt
    slopes = k.slope_steps(L, noise.T)
    x0 = np.asarray(x0, dtype=float)
    H = x0.copy()
    Hs = np.empty((L + 1, x0.shape[0]))
    comp = np.empty_like(Hs)
    Hs[0] = x0
    inc = noise.dB[None]
    for j in range(L):
        res = simulate_batch(pack, H, inc[:, :j], dt, want_J=True)
        y = res.x
        comp[j] = y[0]
        w = pack.coeff_apply(y, slopes[j][None])
        c = _gram_solve(res.J, w)[0]
        step1 = pack.frame(H) @ c
        Hp = pack.retract((H + tau * dt * step1)[None])[0]
        res2 = simulate_batch(pack, Hp, inc[:, :j + 1], dt, want_J=True)
        w2 = pack.coeff_apply(res2.x, slopes[min(j + 1, L - 1)][None])
        c2 = _gram_solve(res2.J, w2)[0]
        step2 = pack.frame(Hp) @ c2
        H = pack.retract((H + 0.5 * tau * dt * (step1 + step2))[None])[0]
        Hs[j + 1] = H
    comp[L] = simulate_batch(pack, H, inc, dt).x[0]
    return Hs, comp


def perturbation_ode(path: FlowPath, k: CameronMartinPath, tau: float,
                     mode: str = "fast") -> np.ndarray:
    """Initial-condition perturbation H at every node of the path grid.

    fast: frozen-path linearization, first order in tau, using the
    path's stored derivative flow.  reference: nested re-integration of
    the flow from each perturbed point (exact composition semantics).
    """
    sys, noise = path.system, path.noise
    L, dt = noise.steps, noise.dt
    if k.dim != noise.dim:
        raise PreconditionError("perturbation direction dimension mismatch")
    slopes = k.slope_steps(L, noise.T)
    x0 = path.points[0]
    if tau == 0.0 or not np.any(slopes):
        return np.tile(x0, (L + 1, 1))
    if mode == "reference":
        return _reference_perturbation(sys, x0, noise, k, tau)[0]
    if mode != "fast":
        raise UsageError(f"unknown perturbation mode {mode!r}")
    pack = resolve_pack(sys)
    nodes = np.concatenate([slopes, slopes[-1:]], axis=0)
    w = pack.coeff_apply(path.points, nodes)
    fw = np.einsum("jik,ji->jk", path.frames, w)
    c = np.einsum("jab,jb->ja", path.Dinv, fw)
    I = np.zeros_like(c)
    np.cumsum(0.5 * dt * (c[:-1] + c[1:]), axis=0, out=I[1:])
    out = pack.retract(x0[None] + tau * I @ path.frames[0].T)
    out[0] = x0
    return out


def compose_check(sys: DiffusionSystem, x0, noise: DrivingNoise,
                  k: CameronMartinPath, tau: float, dt: float) -> float:
    """Supremum distance between the shifted flow and the flow started
    from the perturbed initial points, over the whole grid."""
    if not np.isclose(dt, noise.dt, rtol=1e-12, atol=0.0):
        raise GridError(
            f"dt={dt!r} does not match the noise grid ({noise.dt!r})")
    pack = resolve_pack(sys)
    shifted = shifted_flow(sys, x0, noise, k, tau).points
    _, comp = _reference_perturbation(sys, x0, noise, k, tau)
    return float(np.max(pack.distance(comp, shifted)))
