"""
CSV outputs of the solve / verify / simulate / conjugate workflows
"""
import os
from typing import List

import numpy as np
import pandas as pd

from config import CSV_FLOAT_FORMAT, INF_TOKEN, NAN_TOKEN
from analysis.bsde_engine import ValueReport
from analysis.verify import VerificationRow
from market.penalty import PenaltySpec, conjugate, conjugate_argmax, evaluate_h
from errors import UnboundedConjugateError


def _tokenize(df: pd.DataFrame) -> pd.DataFrame:
    """Infinite floats as INF / -INF tokens; NaN is written via na_rep"""
    out = df.copy()
    for col in out.columns:
        if pd.api.types.is_float_dtype(out[col]) and np.isinf(out[col]).any():
            values = out[col].to_numpy()
            formatted = np.array([CSV_FLOAT_FORMAT % v if np.isfinite(v) else
                                  (NAN_TOKEN if np.isnan(v) else (INF_TOKEN if v > 0 else "-" + INF_TOKEN))
                                  for v in values], dtype=object)
            out[col] = formatted
    return out


def save_csv(df: pd.DataFrame, output_dir: str, filename: str, label: str) -> str:
    os.makedirs(output_dir, exist_ok=True)
    output_file = os.path.join(output_dir, filename)
    _tokenize(df).to_csv(output_file, index=False, float_format=CSV_FLOAT_FORMAT,
                         na_rep=NAN_TOKEN, lineterminator="\n")
    print(f"Saved {label} to {output_file}")
    return output_file


def value_report_frame(report: ValueReport, instance: str = "") -> pd.DataFrame:
    return pd.DataFrame([{
        "instance": instance,
        "convention": report.convention,
        "mode": report.mode,
        "steps": report.steps,
        "Y0": report.Y0,
        "V0": report.V0,
        "h0": report.h0,
    }])


def curve_frame(report: ValueReport) -> pd.DataFrame:
    """t, Y, f(t, 0), h, rho on the ODE grid; on the lattice Y is the root-path value"""
    if report.mode == "ode":
        Y, f0 = report.Y, report.f0
    else:
        # deterministic coefficients: every node of a slice carries the same value
        Y = np.array([float(np.mean(y)) for y in report.solution.Y])
        f0 = np.full(len(report.times), np.nan)
    return pd.DataFrame({"t": report.times, "Y": Y, "f0": f0, "h": report.h, "rho": report.rho})


def strategy_frame(report: ValueReport) -> pd.DataFrame:
    """
    Optimal strategy dump

    ODE path: one row per grid time (t, Y, pi_1..d, c_star).
    Lattice path: one row per node (t, node, Y, Z_1..m, pi_1..d, c_star).
    """
    if report.mode == "ode":
        pi = np.asarray(report.pi)
        df = pd.DataFrame({"t": report.times[:-1], "Y": report.Y[:-1]})
        for i in range(pi.shape[1]):
            df[f"pi_{i + 1}"] = pi[:, i]
        df["c_star"] = report.c
        return df

    solution = report.solution
    lattice = solution.lattice
    frames = []
    for k in range(lattice.num_steps):
        Y = solution.Y[k]
        nodes = np.indices(Y.shape).reshape(Y.ndim, -1).T
        rows = {"t": np.full(len(nodes), lattice.times[k]),
                "node": [":".join(str(int(i)) for i in node) for node in nodes],
                "Y": Y.reshape(-1)}
        Z = solution.Z[k].reshape(len(nodes), -1)
        for j in range(Z.shape[1]):
            rows[f"Z_{j + 1}"] = Z[:, j]
        pi = report.pi[k].reshape(len(nodes), -1)
        for i in range(pi.shape[1]):
            rows[f"pi_{i + 1}"] = pi[:, i]
        rows["c_star"] = report.c[k].reshape(-1)
        frames.append(pd.DataFrame(rows))
    return pd.concat(frames, ignore_index=True)


def verification_frame(rows: List[VerificationRow]) -> pd.DataFrame:
    return pd.DataFrame([{
        "check": r.check, "instance": r.instance, "value": r.value,
        "tolerance": r.tolerance, "passed": r.passed, "detail": r.detail,
    } for r in rows], columns=["check", "instance", "value", "tolerance", "passed", "detail"])


def paths_frame(times: np.ndarray, wealth: np.ndarray, pi: np.ndarray, c: np.ndarray) -> pd.DataFrame:
    """Long format: t, path_id, X, pi_1..d, c (controls at the last step repeat at T)"""
    num_paths, num_times = wealth.shape
    pi_full = np.vstack([pi, pi[-1:]])
    c_full = np.append(c, c[-1])
    df = pd.DataFrame({
        "t": np.tile(times, num_paths),
        "path_id": np.repeat(np.arange(num_paths), num_times),
        "X": wealth.reshape(-1),
    })
    for i in range(pi_full.shape[1]):
        df[f"pi_{i + 1}"] = np.tile(pi_full[:, i], num_paths)
    df["c"] = np.tile(c_full, num_paths)
    return df


def conjugate_frame(spec: PenaltySpec, grid: np.ndarray) -> pd.DataFrame:
    """
    h* on a grid of y values (shape (n, m)) with the corrected growth bound
    |y|^2 / (4 kappa1) + kappa2 and the Fenchel-Young residual
    h(y) + h*(y) - <y, y>, which is nonnegative
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    h_star = np.asarray(conjugate(spec, grid), dtype=float)
    norms_sq = np.sum(grid ** 2, axis=1)
    if spec.kappa1 > 0:
        bound = norms_sq / (4.0 * spec.kappa1) + spec.kappa2
    else:
        bound = np.full(len(grid), np.inf)
    with np.errstate(invalid="ignore"):
        residual = evaluate_h(spec, grid) + h_star - norms_sq

    df = pd.DataFrame({f"y_{j + 1}": grid[:, j] for j in range(grid.shape[1])})
    df["h_star"] = h_star
    df["growth_bound"] = bound
    df["within_bound"] = h_star <= bound + 1e-9
    df["fenchel_young_residual"] = residual
    x_star = np.full(grid.shape, np.nan)
    finite = np.isfinite(h_star)
    if finite.any():
        try:
            x_star[finite] = conjugate_argmax(spec, grid[finite])
        except UnboundedConjugateError:
            pass
    for j in range(grid.shape[1]):
        df[f"x_star_{j + 1}"] = x_star[:, j]
    return df


def parse_grid(text: str, dim: int) -> np.ndarray:
    """'LO:HI:STEP' -> points on [LO, HI]^dim (HI included when on the lattice)"""
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise ValueError(f"grid must look like LO:HI:STEP, got '{text}'")
    if not step > 0 or hi < lo:
        raise ValueError(f"grid needs STEP > 0 and HI >= LO, got '{text}'")
    count = int(np.floor((hi - lo) / step + 1e-9)) + 1
    axis = lo + step * np.arange(count)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)
