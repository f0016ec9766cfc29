"""
Problem description: strict YAML schema, validation with field paths,
normalized round-trip form and construction of the solver objects
"""
import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Optional

import numpy as np
import yaml

from config import (CONVENTIONS, DEFAULT_CONVENTION, DEFAULT_MODE, DEFAULT_STEPS,
                    MAX_LATTICE_ASSETS, MAX_LATTICE_BROWNIAN_DIM, MODES, OUTPUT_DIR, SCHEMA_VERSION)
from errors import ConfigError, InvalidSetError, LatticeDimensionError, RobustLogError
from analysis.generator import GeneratorBundle
from analysis.verify import VerifySettings
from market.constraints import ConstraintSet
from market.model import MarketModel, ProblemWeights, check_ellipticity
from market.penalty import PenaltySpec, check_growth, load_tabulated_csv
from market.piecewise import PiecewiseConstant

SCHEMA = {
    "schema_version": None,
    "model": {"d", "m", "b", "sigma", "eps", "K"},
    "weights": {"alpha", "alpha_bar", "beta", "delta", "T", "x"},
    "penalty": {"kind", "weight", "kappa1", "kappa2", "domain_radius", "radii", "values", "file"},
    "constraints": {"portfolio", "consumption"},
    "solver": {"N", "mode", "convention"},
    "verify": {"eta_grid", "strategy_perturbations", "perturbation_scale", "checkpoints", "seed",
               "tolerances", "closed_form_samples", "pi_step"},
    "output": {"directory", "formats"},
}
REQUIRED = {"model": {"b", "sigma"}, "weights": {"alpha", "alpha_bar", "beta", "T", "x"}, "penalty": {"kind"}}
NESTED = {"verify.eta_grid": {"step", "half_points"},
          "verify.tolerances": {"value", "crosscheck", "closed_form"}}


def _number(value, path: str) -> float:
    # PyYAML reads 1e-4 (no dot) as a string
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise ConfigError(path, f"expected a number, got {value!r}")
    if np.isnan(out):
        raise ConfigError(path, "NaN is not allowed")
    return out


def _integer(value, path: str) -> int:
    number = _number(value, path)
    if number != int(number):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    return int(number)


def _numeric_tree(value, path: str):
    """Convert nested lists (or {times, values} mappings) of numeric strings to floats"""
    if isinstance(value, dict):
        unknown = set(value) - {"times", "values"}
        if unknown or not {"times", "values"} <= set(value):
            raise ConfigError(path, "piecewise coefficients need exactly the keys 'times' and 'values'")
        return {"times": _numeric_tree(value["times"], f"{path}.times"),
                "values": _numeric_tree(value["values"], f"{path}.values")}
    if isinstance(value, (list, tuple)):
        return [_numeric_tree(v, f"{path}[{i}]") for i, v in enumerate(value)]
    return _number(value, path)


def _check_keys(block: Any, allowed: set, path: str):
    if not isinstance(block, dict):
        raise ConfigError(path, "expected a mapping")
    for key in block:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}", "unknown key")


@dataclass
class ProblemConfig:
    """Validated problem description and the solver objects built from it"""

    model: MarketModel
    weights: ProblemWeights
    penalty: PenaltySpec
    portfolio_set: ConstraintSet
    consumption_set: ConstraintSet
    steps: int = DEFAULT_STEPS
    mode: str = DEFAULT_MODE
    convention: str = DEFAULT_CONVENTION
    verify: VerifySettings = field(default_factory=VerifySettings)
    output_dir: str = OUTPUT_DIR
    formats: tuple = ("csv",)
    source: Optional[str] = None

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("solver.N", f"must be a positive integer, got {self.steps}")
        if self.mode not in MODES:
            raise ConfigError("solver.mode", f"expected one of {MODES}, got {self.mode!r}")
        if self.convention not in CONVENTIONS:
            raise ConfigError("solver.convention", f"expected one of {CONVENTIONS}, got {self.convention!r}")
        if self.mode == "lattice":
            if self.model.brownian_dim > MAX_LATTICE_BROWNIAN_DIM:
                raise LatticeDimensionError(
                    "model.m", f"lattice dimension cap is m <= {MAX_LATTICE_BROWNIAN_DIM}, got m={self.model.brownian_dim}"
                )
            if self.model.num_assets > MAX_LATTICE_ASSETS:
                raise LatticeDimensionError(
                    "model.d", f"lattice dimension cap is d <= {MAX_LATTICE_ASSETS}, got d={self.model.num_assets}"
                )

    def with_overrides(self, **overrides) -> "ProblemConfig":
        """Copy with non-None overrides applied (steps, mode, convention, seed, output_dir)"""
        seed = overrides.pop("seed", None)
        changes = {k: v for k, v in overrides.items() if v is not None}
        updated = replace(self, **changes)
        if seed is not None:
            updated = replace(updated, verify=replace(updated.verify, seed=int(seed)))
        return updated

    def build_bundle(self, convention: Optional[str] = None) -> GeneratorBundle:
        return GeneratorBundle(self.model, self.weights, self.penalty, self.portfolio_set,
                               self.consumption_set, convention or self.convention)

    def to_dict(self) -> Dict[str, Any]:
        """Normalized form; load_config_dict(to_dict()) reproduces the same problem"""
        v = self.verify
        return {
            "schema_version": SCHEMA_VERSION,
            "model": {
                "d": self.model.num_assets, "m": self.model.brownian_dim,
                "b": self.model.drift.to_spec(), "sigma": self.model.volatility.to_spec(),
                "eps": self.model.eps, "K": self.model.K,
            },
            "weights": {
                "alpha": self.weights.alpha, "alpha_bar": self.weights.alpha_bar,
                "beta": self.weights.beta, "delta": self.weights.delta.to_spec(),
                "T": self.weights.horizon, "x": self.weights.initial_wealth,
            },
            "penalty": self.penalty.to_dict(),
            "constraints": {"portfolio": self.portfolio_set.to_spec(),
                            "consumption": self.consumption_set.to_spec()},
            "solver": {"N": self.steps, "mode": self.mode, "convention": self.convention},
            "verify": {
                "eta_grid": {"step": v.eta_step, "half_points": v.eta_half_points},
                "strategy_perturbations": v.perturbations,
                "perturbation_scale": list(v.perturbation_scale),
                "checkpoints": list(v.checkpoints),
                "seed": v.seed,
                "tolerances": {"value": v.value_tol, "crosscheck": v.crosscheck_tol,
                               "closed_form": v.closed_form_tol},
                "closed_form_samples": v.closed_form_samples,
                "pi_step": v.pi_step,
            },
            "output": {"directory": self.output_dir, "formats": list(self.formats)},
        }

    def instance_hash(self) -> str:
        """First 12 hex digits of the sha256 of the normalized problem"""
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def load_config(path: str) -> ProblemConfig:
    """
    Load and validate a YAML problem file

    Raises:
        ConfigError: with the offending field path
    """
    if not os.path.exists(path):
        raise ConfigError("config", f"file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError("config", f"not valid YAML: {e}")
    config = load_config_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))
    config.source = path
    return config


def load_config_dict(data: Any, base_dir: str = ".") -> ProblemConfig:
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a mapping")
    _check_keys(data, set(SCHEMA), "config")
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"expected {SCHEMA_VERSION}, got {data.get('schema_version')!r}")
    for block, allowed in SCHEMA.items():
        if allowed is not None and block in data:
            _check_keys(data[block], allowed, block)
    for block, required in REQUIRED.items():
        if block not in data:
            raise ConfigError(block, "missing block")
        for key in sorted(required - set(data[block])):
            raise ConfigError(f"{block}.{key}", "missing required key")

    model = _build_model(data["model"])
    weights = _build_weights(data["weights"])
    penalty = _build_penalty(data["penalty"], model.brownian_dim, base_dir)
    _check_invariants(model, penalty)
    constraints = data.get("constraints") or {}
    portfolio = _build_set(constraints.get("portfolio", [{"type": "whole"}]), model.num_assets,
                           "constraints.portfolio")
    consumption = _build_set(constraints.get("consumption", [{"type": "whole"}]), 1,
                             "constraints.consumption")

    solver = data.get("solver") or {}
    output = data.get("output") or {}
    return ProblemConfig(
        model=model, weights=weights, penalty=penalty, portfolio_set=portfolio,
        consumption_set=consumption,
        steps=_integer(solver.get("N", DEFAULT_STEPS), "solver.N"),
        mode=solver.get("mode", DEFAULT_MODE),
        convention=solver.get("convention", DEFAULT_CONVENTION),
        verify=_build_verify(data.get("verify") or {}),
        output_dir=str(output.get("directory", OUTPUT_DIR)),
        formats=tuple(output.get("formats", ["csv"])),
    )


def _build_model(block: dict) -> MarketModel:
    b = _numeric_tree(block["b"], "model.b")
    sigma = _numeric_tree(block["sigma"], "model.sigma")
    try:
        drift = PiecewiseConstant.from_spec(b)
        volatility = PiecewiseConstant.from_spec(sigma)
    except ValueError as e:
        raise ConfigError("model", str(e))

    # scalars and vectors are promoted: sigma 0.3 -> [[0.3]], b 0.2 -> [0.2]
    if volatility.values.ndim == 1:
        volatility = PiecewiseConstant(volatility.breaks, volatility.values[:, np.newaxis, np.newaxis])
    elif volatility.values.ndim == 2:
        volatility = PiecewiseConstant(volatility.breaks, volatility.values[:, np.newaxis, :])
    if drift.values.ndim == 1:
        drift = PiecewiseConstant(drift.breaks, drift.values[:, np.newaxis])
    d, m = volatility.value_shape
    for key, inferred in (("d", d), ("m", m)):
        if key in block and _integer(block[key], f"model.{key}") != inferred:
            raise ConfigError(f"model.{key}", f"declared {block[key]} but sigma implies {inferred}")

    try:
        return MarketModel(d, m, drift, volatility, _number(block.get("eps", 1e-4), "model.eps"),
                           _number(block.get("K", 1e4), "model.K"))
    except ValueError as e:
        raise ConfigError("model", str(e))


def _check_invariants(model: MarketModel, penalty: PenaltySpec):
    """Ellipticity of sigma sigma^T and the declared penalty growth, re-checked at load"""
    ellipticity = check_ellipticity(model)
    if not ellipticity.ok:
        raise ConfigError(
            "model.sigma", f"eigenvalues of sigma sigma^T in [{ellipticity.worst_eigen_low:.6g}, "
            f"{ellipticity.worst_eigen_high:.6g}] leave the bounds [eps, K] = [{model.eps:g}, {model.K:g}]"
        )
    growth = check_growth(penalty)
    if not growth.ok:
        raise ConfigError(
            "penalty.kappa1", f"h(x) >= kappa1 |x|^2 - kappa2 fails at |x| = {growth.first_violation_radius:g} "
            f"(largest kappa1 that holds: {growth.kappa1_observed:.6g})"
        )


def _build_weights(block: dict) -> ProblemWeights:
    values = {key: _number(block[key], f"weights.{key}") for key in ("alpha", "alpha_bar", "beta", "T", "x")}
    delta = PiecewiseConstant.from_spec(_numeric_tree(block.get("delta", 0.0), "weights.delta"))
    field_of = {"initial_wealth": "weights.x", "horizon": "weights.T", "alpha_bar": "weights.alpha_bar",
                "beta": "weights.beta", "alpha": "weights.alpha", "delta": "weights.delta"}
    try:
        return ProblemWeights(values["alpha"], values["alpha_bar"], values["beta"], delta,
                              values["T"], values["x"])
    except ValueError as e:
        message = str(e)
        path = next((p for name, p in field_of.items() if message.startswith(name)), "weights")
        raise ConfigError(path, message)


def _build_penalty(block: dict, dim: int, base_dir: str) -> PenaltySpec:
    kind = block["kind"]
    growth = {key: _number(block.get(key, 0.0), f"penalty.{key}") for key in ("kappa1", "kappa2")}
    radius = _number(block.get("domain_radius", np.inf), "penalty.domain_radius")
    try:
        if kind == "tabulated":
            if "file" in block:
                path = block["file"] if os.path.isabs(block["file"]) else os.path.join(base_dir, block["file"])
                return load_tabulated_csv(path, dim, domain_radius=radius, **growth)
            if "radii" not in block or "values" not in block:
                raise ConfigError("penalty", "tabulated penalty needs 'file' or 'radii' and 'values'")
            return PenaltySpec("tabulated", dim, domain_radius=radius,
                               radii=np.asarray(_numeric_tree(block["radii"], "penalty.radii")),
                               values=np.asarray(_numeric_tree(block["values"], "penalty.values")), **growth)
        for key in ("file", "radii", "values"):
            if key in block:
                raise ConfigError(f"penalty.{key}", f"only valid for the tabulated kind, not {kind!r}")
        weight = _number(block.get("weight", 1.0), "penalty.weight")
        return PenaltySpec(kind, dim, weight=weight, domain_radius=radius, **growth)
    except (ValueError, FileNotFoundError) as e:
        raise ConfigError("penalty", str(e))


def _build_set(specs, dim: int, path: str) -> ConstraintSet:
    if isinstance(specs, dict):
        specs = [specs]
    if not isinstance(specs, list) or not specs:
        raise ConfigError(path, "expected a nonempty list of primitives")
    try:
        normalized = [{key: (value if key == "type" else _numeric_tree(value, f"{path}[{i}].{key}"))
                       for key, value in spec.items()} for i, spec in enumerate(specs)]
    except AttributeError:
        raise ConfigError(path, "each primitive must be a mapping with a 'type' key")
    for i, spec in enumerate(normalized):
        try:
            ConstraintSet.from_spec([spec], dim)
        except InvalidSetError as e:
            raise ConfigError(f"{path}[{i}]", str(e))
    return ConstraintSet.from_spec(normalized, dim)


def _build_verify(block: dict) -> VerifySettings:
    for key, allowed in NESTED.items():
        sub = key.split(".")[1]
        if sub in block:
            _check_keys(block[sub], allowed, key)
    grid = block.get("eta_grid") or {}
    tolerances = block.get("tolerances") or {}
    defaults = VerifySettings()
    try:
        return VerifySettings(
            checkpoints=tuple(_number(c, "verify.checkpoints") for c in block.get("checkpoints", defaults.checkpoints)),
            perturbations=_integer(block.get("strategy_perturbations", defaults.perturbations),
                                   "verify.strategy_perturbations"),
            perturbation_scale=tuple(_number(s, "verify.perturbation_scale")
                                     for s in block.get("perturbation_scale", defaults.perturbation_scale)),
            seed=_integer(block.get("seed", defaults.seed), "verify.seed"),
            value_tol=_number(tolerances.get("value", defaults.value_tol), "verify.tolerances.value"),
            crosscheck_tol=_number(tolerances.get("crosscheck", defaults.crosscheck_tol),
                                   "verify.tolerances.crosscheck"),
            closed_form_tol=_number(tolerances.get("closed_form", defaults.closed_form_tol),
                                    "verify.tolerances.closed_form"),
            closed_form_samples=_integer(block.get("closed_form_samples", defaults.closed_form_samples),
                                         "verify.closed_form_samples"),
            pi_step=_number(block.get("pi_step", defaults.pi_step), "verify.pi_step"),
            eta_step=_number(grid.get("step", defaults.eta_step), "verify.eta_grid.step"),
            eta_half_points=_integer(grid.get("half_points", defaults.eta_half_points),
                                     "verify.eta_grid.half_points"),
        )
    except RobustLogError:
        raise
    except TypeError as e:
        raise ConfigError("verify", str(e))
