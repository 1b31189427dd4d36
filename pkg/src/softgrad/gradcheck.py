"""Finite-difference oracles shared by the test-suite and ``softgrad gradcheck``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from softgrad import tape as T


def central_diff(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    # C order keeps reshape(-1) a view, so in-place perturbations reach x
    x = np.array(x, dtype=np.float64, order="C")
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)


def tape_grad(f: Callable, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Value and tape gradient of scalar ``f`` at ``x``."""
    g = T.TapeGraph()
    xv = g.leaf(x)
    out = f(xv)
    return float(T.value(out)), g.backward(out)[xv]


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag}  {self.name:<40s} max_rel_err={self.error:.3e}  tol={self.tol:.0e}"


def check(name: str, f: Callable, x: np.ndarray, tol: float, h: float = 1e-6) -> CheckResult:
    _, g = tape_grad(f, x)
    fd = central_diff(lambda z: T.value(f(z)), x, h)
    return CheckResult(name, rel_error(g, fd), tol)
