"""State checkpoints `state_<step>.ckpt` in the binary array format."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .arrayfile import ArrayFileError, read_arrays, write_arrays
from .em_fields import EMState
from .kinetic_solver import CascadeState, VMBState, VPBState
from .phase_grid import PairDistribution, SpatialGrid, VelocityGrid


def checkpoint_name(step: int) -> str:
    return f"state_{step}.ckpt"


def _grids(f: PairDistribution) -> dict:
    return {"sgrid": f.sgrid.to_dict(), "vgrid": f.vgrid.to_dict()}


def save_state(path: str | os.PathLike, state) -> Path:
    """Write a VMB, VPB or cascade state with exact float64 contents."""
    if isinstance(state, VMBState):
        em = state.em
        arrays = {"f_plus": state.f.plus, "f_minus": state.f.minus, "E": em.E, "B_tilde": em.B_tilde}
        meta = {"kind": "vmb", "t": state.t, "step": state.step, "epsilon": em.epsilon,
                "B_background": [float(x) for x in em.B_background], **_grids(state.f)}
    elif isinstance(state, VPBState):
        arrays = {"f_plus": state.f.plus, "f_minus": state.f.minus}
        meta = {"kind": "vpb", "t": state.t, "step": state.step, "epsilon": state.epsilon,
                "B_eff": [float(x) for x in state.B_eff], **_grids(state.f)}
    elif isinstance(state, CascadeState):
        arrays = {"fP_plus": state.f_P.plus, "fP_minus": state.f_P.minus,
                  "fm_plus": state.f_m.plus, "fm_minus": state.f_m.minus, "E_m": state.E_m, "B_m": state.B_m}
        for i, g in enumerate(state.f_levels, start=1):
            arrays[f"f{i}_plus"] = g.plus
            arrays[f"f{i}_minus"] = g.minus
        meta = {"kind": "cascade", "t": state.t, "step": state.step, "epsilon": state.epsilon, "m": state.m,
                "B_P": [float(x) for x in state.B_P], "B_levels": [[float(x) for x in b] for b in state.B_levels],
                **_grids(state.f_P)}
    else:
        raise TypeError(f"cannot checkpoint {type(state).__name__}")
    return write_arrays(path, arrays, meta)


def load_state(path: str | os.PathLike):
    arrays, meta = read_arrays(path)
    try:
        sg = SpatialGrid.from_dict(meta["sgrid"])
        vg = VelocityGrid.from_dict(meta["vgrid"])
        kind = meta["kind"]
    except KeyError as exc:
        raise ArrayFileError(f"checkpoint header lacks {exc}") from exc

    def pair(prefix: str) -> PairDistribution:
        return PairDistribution(arrays[prefix + "_plus"], arrays[prefix + "_minus"], sg, vg)

    if kind == "vmb":
        em = EMState(arrays["E"], arrays["B_tilde"], np.array(meta["B_background"]), meta["epsilon"])
        return VMBState(pair("f"), em, meta["t"], meta["step"])
    if kind == "vpb":
        return VPBState(pair("f"), np.array(meta["B_eff"]), meta["epsilon"], meta["t"], meta["step"])
    if kind == "cascade":
        m = int(meta["m"])
        levels = [pair(f"f{i}") for i in range(1, m)]
        return CascadeState(pair("fP"), levels, pair("fm"), arrays["E_m"], arrays["B_m"], np.array(meta["B_P"]),
                            [np.array(b) for b in meta["B_levels"]], meta["epsilon"], m, meta["t"], meta["step"])
    raise ArrayFileError(f"unknown checkpoint kind {kind!r}")


def latest_checkpoint(directory: str | os.PathLike) -> Path | None:
    best, best_step = None, -1
    for p in Path(directory).glob("state_*.ckpt"):
        try:
            step = int(p.stem.split("_", 1)[1])
        except ValueError:
            continue
        if step > best_step:
            best, best_step = p, step
    return best


def checkpoint_writer(directory: str | os.PathLike):
    """Callable for kinetic_solver.run writing state_<step>.ckpt into directory."""
    directory = Path(directory)

    def write(state) -> Path:
        return save_state(directory / checkpoint_name(state.step), state)

    return write
