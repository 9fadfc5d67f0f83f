"""Result files: legacy-VTK fields, history CSV, restart checkpoints.

Field files hold the subcell triangulation with duplicated points per
subcell corner so discontinuous enriched fields render faithfully; cell
data carries the phase and fluid region, point data the active-level
u, p, c, psi, psibar and the nodal level set. Floats are written with
repr so identical runs produce bit-identical files.

File layout (legacy VTK, ASCII, UNSTRUCTURED_GRID):
  POINTS n float          one point per (subcell, corner)
  CELLS / CELL_TYPES      triangles (type 5)
  CELL_DATA: phase (int), region (int)
  POINT_DATA: velocity (VECTORS), p, c, psi, psibar, phi (SCALARS)
"""

from __future__ import annotations

import json
import os

import numpy as np

from .cut import FLUID
from .errors import OutputError
from .forms import shape_q1
from .transport import project_indicator


def _r(x):
    return repr(float(x))


def write_vtk_fields(path, cm, flow_state=None, species_state=None, psi=None,
                     indicator_params=None):
    """Write the subcell triangulation with per-corner field values."""
    mesh = cm.mesh
    n = cm.n_dofs
    points, tris, phases, regions = [], [], [], []
    samples = []  # (element, dofs or None) per point batch
    for e, plist in sorted(cm.pieces.items()):
        for p in plist:
            if p.triangles.shape[0] == 0:
                continue
            for tri in p.triangles:
                base = len(points)
                points.extend(tri.tolist())
                tris.append((base, base + 1, base + 2))
                phases.append(int(p.phase))
                regions.append(int(p.region))
                samples.extend([(e, p.dofs if p.phase == FLUID else None)] * 3)

    points = np.asarray(points, dtype=float).reshape(-1, 2)
    npts = points.shape[0]

    def field_at_points(vec, block=0, nblocks=1):
        out = np.zeros(npts)
        if vec is None:
            return out
        elems = np.array([s[0] for s in samples], dtype=np.int64)
        N, _, _, _ = shape_q1(mesh, elems, points)
        for i, (e, dofs) in enumerate(samples):
            if dofs is None:
                continue
            out[i] = N[i] @ vec[block * n + dofs]
        return out

    ux = field_at_points(flow_state, 0)
    uy = field_at_points(flow_state, 1)
    pr = field_at_points(flow_state, 2)
    cc = field_at_points(species_state)
    ps = field_at_points(psi)
    if psi is not None and indicator_params is not None:
        psb = np.where(
            np.array([s[1] is not None for s in samples]),
            project_indicator(ps, indicator_params), 0.0,
        )
    else:
        psb = np.zeros(npts)
    # nodal level set interpolated at the duplicated points
    elems = np.array([s[0] for s in samples], dtype=np.int64) if samples else \
        np.zeros(0, dtype=np.int64)
    if npts:
        N, _, _, _ = shape_q1(mesh, elems, points)
        phi_pts = np.einsum("qa,qa->q", N, cm.phi[mesh.elements[elems]])
    else:
        phi_pts = np.zeros(0)

    try:
        with open(path, "w") as f:
            f.write("# vtk DataFile Version 3.0\n")
            f.write("cutflow fields\nASCII\nDATASET UNSTRUCTURED_GRID\n")
            f.write(f"POINTS {npts} double\n")
            for x, y in points:
                f.write(f"{_r(x)} {_r(y)} 0.0\n")
            f.write(f"CELLS {len(tris)} {4 * len(tris)}\n")
            for a, b, c in tris:
                f.write(f"3 {a} {b} {c}\n")
            f.write(f"CELL_TYPES {len(tris)}\n")
            f.write("5\n" * len(tris))
            f.write(f"CELL_DATA {len(tris)}\n")
            f.write("SCALARS phase int 1\nLOOKUP_TABLE default\n")
            f.write("\n".join(str(p) for p in phases) + ("\n" if phases else ""))
            f.write("SCALARS region int 1\nLOOKUP_TABLE default\n")
            f.write("\n".join(str(r) for r in regions) + ("\n" if regions else ""))
            f.write(f"POINT_DATA {npts}\n")
            f.write("VECTORS velocity double\n")
            for i in range(npts):
                f.write(f"{_r(ux[i])} {_r(uy[i])} 0.0\n")
            for name, arr in (("p", pr), ("c", cc), ("psi", ps),
                              ("psibar", psb), ("phi", phi_pts)):
                f.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                for v in arr:
                    f.write(f"{_r(v)}\n")
    except OSError as exc:
        raise OutputError(f"cannot write field file {path}: {exc}") from exc


class HistoryWriter:
    """Append-only CSV of per-iteration optimization or analysis records."""

    def __init__(self, path, criteria_names, n_constraints):
        self.path = path
        self.criteria_names = list(criteria_names)
        self.n_constraints = n_constraints
        header = (["iteration", "objective"]
                  + [f"g_{i + 1}" for i in range(n_constraints)]
                  + list(self.criteria_names) + ["newton_iters", "feasible"])
        try:
            with open(path, "w") as f:
                f.write(",".join(header) + "\n")
        except OSError as exc:
            raise OutputError(f"cannot write history file {path}: {exc}") from exc

    def append(self, iteration, objective, constraints, crit_values, newton_iters,
               feasible):
        row = [str(iteration), _r(objective)]
        row += [_r(g) for g in constraints]
        row += [_r(crit_values[k]) for k in self.criteria_names]
        row += [str(newton_iters), "1" if feasible else "0"]
        with open(self.path, "a") as f:
            f.write(",".join(row) + "\n")


def write_checkpoint(path, design, optimizer_state, normalization, iteration,
                     extra=None):
    """JSON checkpoint; floats round-trip exactly through repr."""
    payload = {
        "iteration": int(iteration),
        "design": design.values.tolist(),
        "optimizer": optimizer_state.to_dict() if optimizer_state is not None else None,
        "normalization": (None if normalization is None
                          else {str(k): v for k, v in normalization.items()}),
        "extra": extra or {},
    }
    try:
        with open(path, "w") as f:
            json.dump(payload, f)
    except OSError as exc:
        raise OutputError(f"cannot write checkpoint {path}: {exc}") from exc


def read_checkpoint(path):
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as exc:
        raise OutputError(f"cannot read checkpoint {path}: {exc}") from exc


def ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create output directory {path}: {exc}") from exc
