"""Small expression grammar for sources, boundary pressures and initial data.

Expressions are plain strings such as ``"1 - cos(t)"`` or ``"x*(1 - x)"``.
They are parsed with sympy, checked against the allowed symbols and functions,
and compiled to numpy-vectorized callables.
"""

from collections.abc import Callable

import numpy as np
import sympy as sym

ALLOWED_FUNCTIONS = {"sin": sym.sin, "cos": sym.cos, "exp": sym.exp}
ALLOWED_CONSTANTS = {"pi": sym.pi}


def parse_expression(text: str, variables: tuple[str, ...]) -> sym.Expr:
    """
    Parse an expression and validate it against the grammar.

    Args:
        text: Expression source
        variables: Names of the free variables that may appear

    Returns:
        The parsed sympy expression

    Raises:
        ValueError: If the text does not parse or uses names outside the grammar
    """
    symbols = {name: sym.Symbol(name, real=True) for name in variables}
    namespace: dict[str, object] = {**ALLOWED_FUNCTIONS, **ALLOWED_CONSTANTS, **symbols}
    try:
        expr = sym.sympify(str(text), locals=namespace, rational=False)
    except (sym.SympifyError, SyntaxError, TypeError) as e:
        raise ValueError(f"Cannot parse expression '{text}': {e}") from None

    if not isinstance(expr, sym.Expr):
        raise ValueError(f"Expression '{text}' is not arithmetic")

    unknown = {s.name for s in expr.free_symbols} - set(variables)
    if unknown:
        raise ValueError(
            f"Expression '{text}' uses unknown names {sorted(unknown)}; "
            f"allowed variables: {list(variables)}"
        )

    allowed = set(ALLOWED_FUNCTIONS.values())
    for func in expr.atoms(sym.Function):
        if func.func not in allowed:
            raise ValueError(
                f"Expression '{text}' uses unsupported function '{func.func}'"
            )
    return expr


def compile_expression(
    text: str, variables: tuple[str, ...]
) -> Callable[..., np.ndarray]:
    """Compile an expression to a callable broadcasting over numpy arrays."""
    expr = parse_expression(text, variables)
    symbols = [sym.Symbol(name, real=True) for name in variables]
    func = sym.lambdify(symbols, expr, "numpy")

    def evaluate(*args: np.ndarray | float) -> np.ndarray:
        arrays = [np.asarray(a, dtype=float) for a in args]
        value = np.asarray(func(*arrays), dtype=float)
        # constant expressions do not broadcast on their own
        shape = np.broadcast_shapes(*(a.shape for a in arrays)) if arrays else ()
        return np.broadcast_to(value, shape).copy()

    return evaluate


def time_function(text: str) -> Callable[[float], float]:
    """Compile an expression in ``t`` to a scalar function of time."""
    evaluate = compile_expression(text, ("t",))

    def amplitude(t: float) -> float:
        return float(evaluate(t))

    return amplitude


def space_function(text: str) -> Callable[[np.ndarray], np.ndarray]:
    """Compile an expression in the local edge coordinate ``x``."""
    evaluate = compile_expression(text, ("x",))

    def profile(x: np.ndarray) -> np.ndarray:
        return evaluate(x)

    return profile


def tabulated_function(
    times: list[float], values: list[float]
) -> Callable[[float], float]:
    """Piecewise-linear interpolant of a tabulated time series."""
    t_arr = np.asarray(times, dtype=float)
    v_arr = np.asarray(values, dtype=float)
    if t_arr.shape != v_arr.shape or t_arr.size < 2:
        raise ValueError("Tabulated series needs matching times/values of length >= 2")
    if np.any(np.diff(t_arr) <= 0):
        raise ValueError("Tabulated series times must be strictly increasing")

    def amplitude(t: float) -> float:
        return float(np.interp(t, t_arr, v_arr))

    return amplitude
