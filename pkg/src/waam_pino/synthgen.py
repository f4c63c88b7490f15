"""Synthetic thermo-mechanical data for a zigzag-deposited thin wall.

Explicit finite-difference heat conduction on the wall side plane with a
moving double-ellipsoid source, birth-death activation of deposited cells,
an interlayer dwell, and a deterministic distortion proxy driven by the
accumulated inelastic temperature excursion. The proxy is synthetic: it
makes distortion a causal function of thermal history, nothing more.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .fields import Center, FieldFrame, FieldSequence, GridGeometry


class GenerationError(ValueError):
    pass


class ThermalInstabilityError(FloatingPointError):
    pass


@dataclass(frozen=True)
class MaterialProps:
    rho: float = 7850.0
    cp: float = 600.0
    k_cond: float = 45.0
    h_conv: float = 15.0
    t_ambient: float = 293.15

    def __post_init__(self):
        if min(self.rho, self.cp, self.k_cond) <= 0 or self.h_conv < 0 or self.t_ambient < 0:
            raise GenerationError(f"invalid material constants: {self}")

    @property
    def heat_capacity(self) -> float:
        return self.rho * self.cp


@dataclass(frozen=True)
class ProcessCase:
    case_id: str
    wfs: float            # wire feed speed, m/min
    ts: float             # travel speed, m/min
    layer_height: float   # mm
    layer_width: float    # mm
    n_layers: int = 6
    dwell: float = 60.0   # s

    def __post_init__(self):
        if min(self.wfs, self.ts, self.layer_height, self.layer_width) <= 0:
            raise GenerationError(f"process parameters must be positive: {self}")
        if self.dwell < 0 or self.n_layers < 1:
            raise GenerationError(f"invalid dwell / layer count: {self}")

    @property
    def travel_speed(self) -> float:
        """m/s"""
        return self.ts / 60.0

    @property
    def thickness(self) -> float:
        """Through-thickness length of the wall plane, m."""
        return self.layer_width * 1e-3

    def rows_per_layer(self, dx: float) -> int:
        return max(1, int(math.floor(self.layer_height * 1e-3 / dx + 0.5)))

    def to_dict(self) -> dict:
        return dict(case_id=self.case_id, wfs=self.wfs, ts=self.ts,
                    layer_height=self.layer_height, layer_width=self.layer_width,
                    n_layers=self.n_layers, dwell=self.dwell)


# (wfs m/min, ts m/min, layer height mm, layer width mm)
TABLE_1 = {
    1: (5, 0.48, 2, 5), 2: (6, 0.48, 2, 6), 3: (6, 0.4, 3, 8), 4: (5, 0.4, 2.5, 8),
    5: (5, 0.45, 2.5, 6), 6: (7, 0.3, 4.5, 8), 7: (7, 0.2, 4.5, 8), 8: (4, 0.4, 2, 5),
    9: (8, 0.6, 2, 8), 10: (6, 0.2, 4, 8), 11: (5, 0.2, 4, 10), 12: (6, 0.6, 3, 8),
    13: (6, 0.3, 4, 8.5), 14: (7, 0.4, 4, 8), 15: (4, 0.6, 3.5, 7), 16: (8, 0.3, 3, 9),
    17: (5, 0.3, 3, 8.5), 18: (8, 0.4, 3, 8), 19: (5.5, 0.3, 3, 6), 20: (5, 0.6, 4, 7),
}


def table_case(number: int, n_layers: int = 6, dwell: float = 60.0) -> ProcessCase:
    wfs, ts, h, w = TABLE_1[number]
    return ProcessCase(f"case{number:02d}", wfs, ts, h, w, n_layers, dwell)


@dataclass(frozen=True)
class SourceParams:
    power: float = 1000.0
    a_f: float = 0.004
    a_r: float = 0.008
    b: float = 0.004
    c: float = 0.004
    f_f: float = 0.6
    f_r: float = 1.4
    efficiency: float = 0.8

    def __post_init__(self):
        if min(self.a_f, self.a_r, self.b, self.c) <= 0:
            raise GenerationError("ellipsoid semi-axes must be positive")
        if not 0 < self.efficiency <= 1:
            raise GenerationError("efficiency must be in (0, 1]")
        if abs(self.f_f + self.f_r - 2.0) > 1e-12:
            raise GenerationError("front and rear fractions must sum to 2")

    @classmethod
    def for_case(cls, pc: ProcessCase, watts_per_wfs: float = 200.0, **kw) -> "SourceParams":
        return cls(power=watts_per_wfs * pc.wfs, **kw)

    def peak(self, front: bool = True) -> float:
        a, f = (self.a_f, self.f_f) if front else (self.a_r, self.f_r)
        return 6.0 * math.sqrt(3.0) * f * self.efficiency * self.power / (
            a * self.b * self.c * math.pi * math.sqrt(math.pi))


@dataclass(frozen=True)
class ProxyParams:
    t_plastic: float = 900.0
    t_liquidus: float = 1750.0
    kappa_z: float = 2.0e-5
    kappa_y: float = 5.0e-6
    blur_radius: int = 1

    def __post_init__(self):
        if not self.t_liquidus > self.t_plastic:
            raise GenerationError("t_liquidus must exceed t_plastic")
        if self.kappa_z <= 0 or self.kappa_y <= 0 or self.blur_radius < 0:
            raise GenerationError("invalid proxy gains")


def goldak_density(p, center, direction, sp: SourceParams) -> np.ndarray:
    """Double-ellipsoid volumetric heat flux (W/m^3) at points ``p`` [..., 3].

    ``direction`` is the travel direction; the third axis is vertical.
    Points ahead of the center (including the center) use the front lobe.
    """
    p = np.asarray(p, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    ez = np.array([0.0, 0.0, 1.0])
    ey = np.cross(ez, d)
    rel = p - np.asarray(center, dtype=np.float64)
    x_l = rel @ d
    y_l = rel @ ey
    z_l = rel @ ez
    front = x_l >= 0
    a = np.where(front, sp.a_f, sp.a_r)
    peak = np.where(front, sp.peak(True), sp.peak(False))
    return peak * np.exp(-3 * x_l**2 / a**2 - 3 * y_l**2 / sp.b**2 - 3 * z_l**2 / sp.c**2)


def plane_source(geom: GridGeometry, center_rc: Center, travel_dir: int,
                 sp: SourceParams, thickness: float) -> np.ndarray:
    """Source density on the wall plane, averaged over the wall thickness."""
    if center_rc is None:
        return np.zeros(geom.shape)
    rows = (np.arange(geom.n_rows) - center_rc[0]) * geom.dx
    cols = (np.arange(geom.n_cols) - center_rc[1]) * geom.dx
    z, x = np.meshgrid(rows, cols, indexing="ij")
    pts = np.stack([x, np.zeros_like(x), z], axis=-1)
    q = goldak_density(pts, (0.0, 0.0, 0.0), (float(travel_dir), 0.0, 0.0), sp)
    # integral of exp(-3 y^2 / b^2) over y, spread across the wall thickness
    return q * sp.b * math.sqrt(math.pi / 3.0) / thickness


def source_fields(geom: GridGeometry, track: Sequence[Center], layer_index: Sequence[int],
                  sp: SourceParams, thickness: float) -> np.ndarray:
    """[steps, rows, cols] source density along a planned torch track."""
    return np.stack([plane_source(geom, c, layer_direction(l), sp, thickness)
                     for c, l in zip(track, layer_index)])


def layer_direction(layer: int) -> int:
    """Zigzag: even layers travel towards +col, odd layers towards -col."""
    return 1 if layer % 2 == 0 else -1


def stable_substeps(geom: GridGeometry, mat: MaterialProps, refine: int = 1) -> int:
    dt_max = geom.dx**2 * mat.heat_capacity / (4.0 * mat.k_cond)
    return int(math.ceil(geom.dt / dt_max - 1e-12)) * int(refine)


def laplacian(temperature: np.ndarray, active: np.ndarray, dx: float) -> np.ndarray:
    """5-point Laplacian with mirrored (zero-flux) ghosts at inactive or out-of-domain neighbours."""
    T = temperature
    Tp = np.pad(T, 1, mode="edge")
    Ap = np.pad(active, 1, mode="constant", constant_values=False)
    lap = np.zeros_like(T)
    for sl in ((slice(0, -2), slice(1, -1)), (slice(2, None), slice(1, -1)),
               (slice(1, -1), slice(0, -2)), (slice(1, -1), slice(2, None))):
        lap += np.where(Ap[sl], Tp[sl], T) - T
    return lap / dx**2


def _substep(T, active, q, mat: MaterialProps, dt_sub, dx, thickness):
    rate = (mat.k_cond * laplacian(T, active, dx) + q
            - (mat.h_conv / thickness) * (T - mat.t_ambient))
    out = np.where(active, T + dt_sub / mat.heat_capacity * rate, mat.t_ambient)
    if not np.all(np.isfinite(out)):
        raise ThermalInstabilityError(
            f"non-finite temperature after sub-step (dt_sub={dt_sub:g} s, max |T|="
            f"{np.nanmax(np.abs(T)):g} K)")
    return out


def step_thermal(temperature, active, source, mat: MaterialProps, sp: SourceParams,
                 geom: GridGeometry, *, thickness: float = 0.005, travel_dir: int = 1,
                 refine: int = 1) -> np.ndarray:
    """Advance a temperature grid by exactly ``geom.dt``.

    ``source`` is None, one (row, col) center held for the whole interval,
    or a sequence of per-sub-step centers.
    """
    active = np.asarray(active, dtype=bool)
    T = np.where(active, np.asarray(temperature, dtype=np.float64), mat.t_ambient)
    n_sub = stable_substeps(geom, mat, refine)
    if source is None or (len(source) == 2 and np.isscalar(source[0])):
        centers = [source] * n_sub
    else:
        centers = list(source)
        if len(centers) != n_sub:
            raise GenerationError(f"expected {n_sub} sub-step centers, got {len(centers)}")
    dt_sub = geom.dt / n_sub
    for c in centers:
        q = plane_source(geom, c, travel_dir, sp, thickness)
        T = _substep(T, active, q, mat, dt_sub, geom.dx, thickness)
    return T


@dataclass(frozen=True)
class DistortionState:
    dist_z: np.ndarray
    dist_y: np.ndarray
    strain: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "DistortionState":
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape))


def box_blur(x: np.ndarray, radius: int) -> np.ndarray:
    """Normalized box filter; windows are renormalized at the domain border."""
    if radius == 0:
        return np.array(x, dtype=np.float64)
    size = 2 * radius + 1
    num = uniform_filter(np.asarray(x, dtype=np.float64), size=size, mode="constant", cval=0.0)
    den = uniform_filter(np.ones_like(x, dtype=np.float64), size=size, mode="constant", cval=0.0)
    return num / den


def height_weight(n_rows: int) -> np.ndarray:
    return ((np.arange(n_rows) + 0.5) / n_rows)[:, None]


def step_distortion(state: DistortionState, T_next, active, pp: ProxyParams,
                    layer_dir: int, dt: float = 1.0) -> DistortionState:
    active = np.asarray(active, dtype=bool)
    eps = np.clip((np.asarray(T_next) - pp.t_plastic) / (pp.t_liquidus - pp.t_plastic), 0.0, 1.0)
    eps = np.where(active, eps, 0.0)
    strain = state.strain + eps * dt
    w_h = height_weight(strain.shape[0])
    dist_z = np.where(active, -pp.kappa_z * box_blur(strain, pp.blur_radius) * w_h, 0.0)
    dist_y = np.where(active, state.dist_y
                      + pp.kappa_y * layer_dir * box_blur(eps * dt, pp.blur_radius), 0.0)
    return DistortionState(dist_z, dist_y, strain)


def run_case(pc: ProcessCase, mat: MaterialProps = MaterialProps(),
             sp: Optional[SourceParams] = None, pp: ProxyParams = ProxyParams(),
             geom: GridGeometry = GridGeometry(), wall_span: Optional[int] = None,
             substrate_rows: int = 5, refine: int = 1) -> FieldSequence:
    """Simulate one deposition case; one frame per ``geom.dt``."""
    sp = SourceParams.for_case(pc) if sp is None else sp
    wall_span = geom.n_cols if wall_span is None else int(wall_span)
    if not 1 <= wall_span <= geom.n_cols:
        raise GenerationError(f"wall span {wall_span} outside 1..{geom.n_cols}")
    h = pc.rows_per_layer(geom.dx)
    if substrate_rows + h * pc.n_layers > geom.n_rows:
        raise GenerationError(
            f"{pc.n_layers} layers x {h} rows on a {substrate_rows}-row substrate "
            f"exceed the {geom.n_rows}-row grid")

    shape = geom.shape
    active = np.zeros(shape, dtype=bool)
    active[:substrate_rows, :] = True
    T = np.full(shape, mat.t_ambient)
    dstate = DistortionState.zeros(shape)
    n_sub = stable_substeps(geom, mat, refine)
    dt_sub = geom.dt / n_sub
    v = pc.travel_speed
    span_len = wall_span * geom.dx
    duration = span_len / v
    n_dep = int(math.ceil(duration / geom.dt - 1e-9))
    n_dwell = int(round(pc.dwell / geom.dt))
    cols = np.arange(geom.n_cols)

    frames, track, layers = [], [], []

    def emit(center, layer, direction):
        nonlocal dstate
        dstate = step_distortion(dstate, T, active, pp, direction, geom.dt)
        frames.append(FieldFrame(T, dstate.dist_z, dstate.dist_y, active))
        track.append(center)
        layers.append(layer)

    for layer in range(pc.n_layers):
        direction = layer_direction(layer)
        r0 = substrate_rows + layer * h
        row_c = r0 + (h - 1) / 2.0
        x0 = 0.0 if direction > 0 else span_len

        def position(t_local):
            return x0 + direction * v * min(t_local, duration)

        for k in range(n_dep):
            for s in range(n_sub):
                t_local = k * geom.dt + s * dt_sub
                x = position(t_local)
                reached = cols * geom.dx <= x if direction > 0 else (cols + 1) * geom.dx >= x
                born = reached & (cols < wall_span) & ~active[r0, :]
                if born.any():
                    active[r0:r0 + h, born] = True
                    T[r0:r0 + h, born] = pp.t_liquidus
                center = None
                if t_local < duration:
                    center = (row_c, min(max(x / geom.dx - 0.5, 0.0), wall_span - 1.0))
                q = plane_source(geom, center, direction, sp, pc.thickness)
                T = _substep(T, active, q, mat, dt_sub, geom.dx, pc.thickness)
            x = position((k + 1) * geom.dt)
            emit((row_c, min(max(x / geom.dx - 0.5, 0.0), wall_span - 1.0)), layer, direction)
        missed = ~active[r0, :wall_span]
        if missed.any():
            active[r0:r0 + h, :wall_span][:, missed] = True
            T[r0:r0 + h, :wall_span][:, missed] = pp.t_liquidus
        for _ in range(n_dwell):
            for _ in range(n_sub):
                T = _substep(T, active, 0.0, mat, dt_sub, geom.dx, pc.thickness)
            emit(None, layer, direction)
    return FieldSequence(geom, tuple(frames), tuple(track), tuple(layers))
