"""Parameter storage, Adam, and a central finite-difference gradient oracle.

Every differentiable operation in the package ships a hand-written backward
pass.  :func:`fd_gradient_check` is the referee for all of them.
"""
from __future__ import annotations

import copy
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np


class ShapeMismatchError(ValueError):
    pass


@dataclass
class _Entry:
    value: np.ndarray
    grad: np.ndarray
    trainable: bool = True


class ParamStore:
    """Named float64 tensors, each paired with a gradient buffer of the same shape."""

    def __init__(self):
        self._entries: dict[str, _Entry] = {}

    def add(self, name, value, trainable=True):
        if name in self._entries:
            raise KeyError(f"parameter {name!r} already exists")
        value = np.array(value, dtype=np.float64)
        self._entries[name] = _Entry(value, np.zeros_like(value), bool(trainable))
        return self

    def _entry(self, name) -> _Entry:
        try:
            return self._entries[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def __contains__(self, name):
        return name in self._entries

    def __getitem__(self, name) -> np.ndarray:
        return self._entry(name).value

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def names(self, trainable_only=False):
        return [n for n, e in self._entries.items() if e.trainable or not trainable_only]

    def grad(self, name) -> np.ndarray:
        return self._entry(name).grad

    def is_trainable(self, name):
        return self._entry(name).trainable

    def set_value(self, name, value):
        entry = self._entry(name)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != entry.value.shape:
            raise ShapeMismatchError(
                f"{name}: expected shape {entry.value.shape}, got {value.shape}")
        entry.value = value.copy()

    def accumulate_grad(self, name, contribution):
        entry = self._entry(name)
        contribution = np.asarray(contribution, dtype=np.float64)
        if contribution.shape != entry.grad.shape:
            raise ShapeMismatchError(
                f"{name}: gradient shape {contribution.shape} does not match {entry.grad.shape}")
        entry.grad += contribution
        return self

    def zero_grad(self):
        for entry in self._entries.values():
            entry.grad[...] = 0.0

    def copy(self):
        return copy.deepcopy(self)

    def state_dict(self):
        return {n: e.value.copy() for n, e in self._entries.items()}


def accumulate_grad(store, name, contribution):
    return store.accumulate_grad(name, contribution)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(store, state):
    """One bias-corrected Adam update over the trainable entries, then zero all grads."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in store.names(trainable_only=True):
        g = store.grad(name)
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(g)
            state.second_moment[name] = np.zeros_like(g)
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        store.set_value(name, store[name] - update)
    store.zero_grad()
    return store, state


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst: str = ""
    per_param: dict = field(default_factory=dict)


def _check_entry(f, store, name, h):
    base = store[name]
    numeric = np.zeros_like(base)
    work = base.copy()
    flat = work.reshape(-1)
    out = numeric.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        store.set_value(name, work)
        fp = f(store)
        flat[k] = orig - h
        store.set_value(name, work)
        fm = f(store)
        flat[k] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            store.set_value(name, base)
            raise FloatingPointError(f"non-finite objective while perturbing {name}[{k}]")
        out[k] = (fp - fm) / (2.0 * h)
    store.set_value(name, base)
    return numeric


def fd_gradient_check(f, store, h=1e-4, tol=1e-4, workers=1, names=None):
    """Compare the gradients already held in ``store`` with central differences of ``f``.

    ``f`` maps a ParamStore to a float and must not touch the gradient buffers.
    The relative error per scalar is ``|a - n| / max(1e-8, |a| + |n|)``.
    With ``workers > 1`` each parameter is perturbed on its own copy of the
    store; the result does not depend on the worker count.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    f0 = f(store)
    if not math.isfinite(f0):
        raise FloatingPointError("objective is not finite at the base point")
    names = list(names) if names is not None else store.names(trainable_only=True)

    def run(name):
        local = store if workers <= 1 else store.copy()
        return _check_entry(f, local, name, h)

    if workers <= 1:
        numerics = [run(n) for n in names]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            numerics = list(pool.map(run, names))

    report = GradCheckReport(0.0, True)
    for name, numeric in zip(names, numerics):
        analytic = store.grad(name)
        rel = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
        worst = float(rel.max()) if rel.size else 0.0
        report.per_param[name] = worst
        if worst > report.max_rel_err:
            report.max_rel_err = worst
            report.worst = name
    report.passed = report.max_rel_err <= tol
    return report
