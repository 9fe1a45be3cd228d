"""JSON run configurations: model, certificate, solver schedules, seeds.

Cost, intensity and certificate functions may be given as arithmetic
expressions in ``x`` (state coordinate) and ``a`` (action parameter). They
are evaluated by a small AST interpreter over numpy, not by ``eval``.
"""

import ast
import json
import math
import operator
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .hjb import default_delta_list
from .lyapunov import LyapunovCertificate, certify_gaussian, tabulated
from .model import ActionSet, CTMDPModel, RateMatrix, StateSpace, build_gaussian_model, read_rate_csv

__all__ = ["ConfigError", "RunConfig", "load_config", "fixture_names", "fixture_path", "compile_expression"]

OUTPUT_ENV = "RISKCTMDP_OUTPUT_DIR"


class ConfigError(ValueError):
    """A configuration document is malformed; the message names the field."""

    def __init__(self, where, message):
        super().__init__(f"{where}: {message}")
        self.where = where


_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}
_UNARY = {ast.UAdd: operator.pos, ast.USub: operator.neg}
_FUNCS = {
    "exp": np.exp,
    "log": np.log,
    "log1p": np.log1p,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "minimum": np.minimum,
    "maximum": np.maximum,
}


def compile_expression(text, constants=None, where="expression"):
    """Turn ``text`` into ``f(x, a)``; names other than ``x``, ``a`` come from ``constants``."""
    names = {"pi": math.pi}
    names.update(constants or {})
    try:
        tree = ast.parse(str(text), mode="eval")
    except SyntaxError as exc:
        raise ConfigError(where, f"cannot parse {text!r}: {exc.msg}") from None

    def check(node):
        if isinstance(node, ast.Expression):
            check(node.body)
        elif isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            check(node.left)
            check(node.right)
        elif isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
            check(node.operand)
        elif isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS:
            if node.keywords:
                raise ConfigError(where, "keyword arguments are not allowed")
            for arg in node.args:
                check(arg)
        elif isinstance(node, ast.Name):
            if node.id not in ("x", "a") and node.id not in names:
                raise ConfigError(where, f"unknown name {node.id!r} in {text!r}")
        elif isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            pass
        else:
            raise ConfigError(where, f"unsupported syntax {type(node).__name__} in {text!r}")

    check(tree)

    def run(node, env):
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](run(node.left, env), run(node.right, env))
        if isinstance(node, ast.UnaryOp):
            return _UNARY[type(node.op)](run(node.operand, env))
        if isinstance(node, ast.Call):
            return _FUNCS[node.func.id](*(run(arg, env) for arg in node.args))
        if isinstance(node, ast.Name):
            return env[node.id]
        return node.value

    def fn(x, a=0.0):
        env = dict(names)
        env["x"] = np.asarray(x, dtype=float)
        env["a"] = np.asarray(a, dtype=float)
        with np.errstate(all="ignore"):
            return np.asarray(run(tree.body, env), dtype=float)

    fn.source = text
    return fn


@dataclass
class RunConfig:
    name: str
    model: CTMDPModel
    certificate: object
    theta_nodes: int = 201
    delta_list: list = field(default_factory=default_delta_list)
    n_list: list = None
    tol: float = 1e-4
    picard_tol: float = 1e-12
    seed: int = 0
    threads: int = 1
    simulate: dict = field(default_factory=dict)
    verify: dict = field(default_factory=dict)
    output_dir: Path = None
    source: dict = field(default_factory=dict, repr=False)


def fixture_names():
    root = resources.files("riskctmdp") / "fixtures"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def fixture_path(name):
    path = resources.files("riskctmdp") / "fixtures" / f"{name}.json"
    if not path.is_file():
        raise ConfigError("fixture", f"unknown fixture {name!r}; available: {', '.join(fixture_names())}")
    return path


def _get(doc, key, where, kind=None, default=...):
    if key not in doc:
        if default is ...:
            raise ConfigError(f"{where}.{key}", "missing required field")
        return default
    value = doc[key]
    if kind is not None and not isinstance(value, kind):
        raise ConfigError(f"{where}.{key}", f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}")
    return value


def _number(doc, key, where, default=..., positive=False, minimum=None):
    value = _get(doc, key, where, (int, float), default)
    if isinstance(value, bool):
        raise ConfigError(f"{where}.{key}", "expected a number, got a boolean")
    if value is not None and not math.isfinite(value):
        raise ConfigError(f"{where}.{key}", "must be finite")
    if positive and value is not None and value <= 0:
        raise ConfigError(f"{where}.{key}", f"must be > 0, got {value}")
    if minimum is not None and value is not None and value < minimum:
        raise ConfigError(f"{where}.{key}", f"must be >= {minimum}, got {value}")
    return value


def _state_space(doc, where):
    if "coords" in doc:
        coords = _get(doc, "coords", where, list)
        return StateSpace.finite(len(coords), coords=coords)
    x_min = _number(doc, "x_min", where)
    x_max = _number(doc, "x_max", where)
    num = _get(doc, "num_states", where, int)
    if not x_min < x_max:
        raise ConfigError(where, f"x_min={x_min} must be < x_max={x_max}")
    if num < 2:
        raise ConfigError(f"{where}.num_states", "must be >= 2")
    return StateSpace.uniform_grid(x_min, x_max, num)


def _table_or_expr(doc, where, space, actions, constants):
    if "values" in doc:
        values = np.asarray(doc["values"], dtype=float)
        try:
            return np.broadcast_to(values, (space.size, actions.count)).copy()
        except ValueError:
            raise ConfigError(f"{where}.values", f"shape {values.shape} does not fit ({space.size}, {actions.count})") from None
    fn = compile_expression(_get(doc, "spec", where, str), constants, f"{where}.spec")
    values = fn(space.coords[:, None], actions.params)
    return np.broadcast_to(values, (space.size, actions.count)).copy()


def _build_model(doc, base_dir):
    where = "model"
    alpha = _number(doc, "alpha", where, positive=True)
    constants = {k: float(v) for k, v in _get(doc, "constants", where, dict, {}).items()}
    grid = _get(doc, "grid", where, dict)
    act = _get(doc, "actions", where, dict)
    count = _get(act, "count", f"{where}.actions", int)
    if count < 1:
        raise ConfigError(f"{where}.actions.count", "must be >= 1")
    kernel = _get(doc, "kernel", where, dict)
    ktype = _get(kernel, "type", f"{where}.kernel", str)
    cost_doc = _get(doc, "cost", where, dict)

    if ktype == "gaussian_jump":
        kw = f"{where}.kernel"
        sigma = _number(kernel, "sigma", kw, positive=True)
        M = _number(kernel, "M", kw, positive=True)
        constants.setdefault("M", M)
        constants.setdefault("sigma", sigma)
        lam = compile_expression(_get(kernel, "lambda", kw, str), constants, f"{kw}.lambda")
        cost = compile_expression(_get(cost_doc, "spec", f"{where}.cost", str), constants, f"{where}.cost.spec")
        try:
            return build_gaussian_model(sigma, M, lam, cost, grid, count, alpha=alpha), constants
        except ValueError as exc:
            raise ConfigError(kw, str(exc)) from None
    if ktype != "rate_matrix":
        raise ConfigError(f"{where}.kernel.type", f"expected 'rate_matrix' or 'gaussian_jump', got {ktype!r}")

    space = _state_space(grid, f"{where}.grid")
    actions = ActionSet.indexed(space.size, count)
    if "csv" in kernel:
        path = Path(kernel["csv"])
        if not path.is_absolute():
            path = base_dir / path
        if not path.is_file():
            raise ConfigError(f"{where}.kernel.csv", f"file not found: {path}")
        rates = read_rate_csv(path, count)
    else:
        rates = np.asarray(_get(kernel, "rates", f"{where}.kernel", list), dtype=float)
    if rates.shape != (space.size, count, space.size):
        raise ConfigError(f"{where}.kernel.rates", f"shape {rates.shape}, expected {(space.size, count, space.size)}")
    cost = _table_or_expr(cost_doc, f"{where}.cost", space, actions, constants)
    try:
        return CTMDPModel(space, actions, RateMatrix(rates), cost, alpha), constants
    except ValueError as exc:
        raise ConfigError(where, str(exc)) from None


def _state_function(spec, where, space, constants):
    if isinstance(spec, list):
        if len(spec) != space.size:
            raise ConfigError(where, f"expected {space.size} values, got {len(spec)}")
        return tabulated(space.coords, spec)
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        value = float(spec)
        return lambda x: np.full(np.shape(x), value)
    fn = compile_expression(spec, constants, where)
    return lambda x: fn(x)


def _build_certificate(doc, model, constants):
    where = "certificate"
    ctype = _get(doc, "type", where, str, "explicit")
    if ctype == "gaussian":
        kernel = constants
        try:
            return certify_gaussian(kernel["sigma"], kernel["M"], _number(doc, "rho1", where), model.alpha)
        except (KeyError, ValueError) as exc:
            raise ConfigError(where, str(exc)) from None
    if ctype != "explicit":
        raise ConfigError(f"{where}.type", f"expected 'explicit' or 'gaussian', got {ctype!r}")
    fields = {}
    for key in ("rho0", "M0", "L0", "rho1", "rho2", "b1", "M1"):
        fields[key] = float(_number(doc, key, where))
    try:
        return LyapunovCertificate(
            V0=_state_function(_get(doc, "V0", where), f"{where}.V0", model.space, constants),
            V1=_state_function(_get(doc, "V1", where), f"{where}.V1", model.space, constants),
            **fields,
        )
    except ValueError as exc:
        raise ConfigError(where, str(exc)) from None


def _schedule(values, where, increasing):
    if not isinstance(values, list) or not values:
        raise ConfigError(where, "must be a nonempty list")
    arr = np.asarray(values, dtype=float)
    steps = np.diff(arr)
    if increasing and np.any(steps <= 0):
        raise ConfigError(where, "must be strictly increasing")
    if not increasing and np.any(steps >= 0):
        raise ConfigError(where, "must be strictly decreasing")
    return [float(v) for v in arr]


def load_config(source, output_dir=None):
    """Parse a config from a path, a fixture name (``fixture:NAME``) or a dict."""
    base_dir = Path.cwd()
    if isinstance(source, dict):
        doc = source
        name = doc.get("name", "config")
    else:
        text = str(source)
        if text.startswith("fixture:"):
            path = fixture_path(text.split(":", 1)[1])
        else:
            path = Path(text)
            if not path.is_file():
                raise ConfigError("config", f"file not found: {path}")
            base_dir = path.parent
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(str(path), f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
        name = doc.get("name", Path(str(path)).stem)
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level must be an object")

    model, constants = _build_model(_get(doc, "model", "config", dict), base_dir)
    cert = None
    if "certificate" in doc:
        cert = _build_certificate(_get(doc, "certificate", "config", dict), model, constants)

    solve = _get(doc, "solve", "config", dict, {})
    theta_nodes = _get(solve, "theta_nodes", "solve", int, 201)
    if theta_nodes < 3:
        raise ConfigError("solve.theta_nodes", "must be >= 3")
    delta_list = solve.get("delta_list")
    delta_list = default_delta_list() if delta_list is None else _schedule(delta_list, "solve.delta_list", False)
    if delta_list[0] >= 1 or delta_list[-1] <= 0:
        raise ConfigError("solve.delta_list", "entries must lie in (0, 1)")
    n_list = solve.get("n_list")
    if n_list is not None:
        n_list = _schedule(n_list, "solve.n_list", True)
        if n_list[0] < 1:
            raise ConfigError("solve.n_list", "entries must be >= 1")

    if output_dir is None:
        output_dir = doc.get("output_dir") or os.environ.get(OUTPUT_ENV) or "riskctmdp-out"
    seed = _get(doc, "seed", "config", int, 0)
    return RunConfig(
        name=name,
        model=model,
        certificate=cert,
        theta_nodes=theta_nodes,
        delta_list=delta_list,
        n_list=n_list,
        tol=_number(solve, "tol", "solve", 1e-4, positive=True),
        picard_tol=_number(solve, "picard_tol", "solve", 1e-12, positive=True),
        seed=seed,
        threads=_get(doc, "threads", "config", int, 1),
        simulate=_get(doc, "simulate", "config", dict, {}),
        verify=_get(doc, "verify", "config", dict, {}),
        output_dir=Path(output_dir),
        source=doc,
    )
