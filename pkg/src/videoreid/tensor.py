"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation in :mod:`videoreid.ops` produces a new :class:`Tensor` whose
graph edges (parent tensors plus a backward rule) are attached on creation.
``backward`` replays those edges in reverse order, either from an explicit
:class:`Tape` or from the graph reachable from the loss. Gradients accumulate
additively into ``Tensor.grad`` until explicitly cleared (``sgd_step`` clears
them after each update).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

# When True, every op output is checked for NaN/inf right after it is
# computed. Tests turn this on; training leaves it off.
CHECK_FINITE = False


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class Tensor:
    """Dense n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_rule", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple["Tensor", ...] = ()
        self._backward_rule: Optional[Callable] = None
        self._op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self._op!r}" if self._op else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"


class Tape:
    """Ordered record of op outputs; inputs always precede their consumers.

    Optional: ``backward`` can also rebuild the order from the graph itself.
    Using a tape bounds what a backward pass touches and is what the training
    loop does once per pair.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    @classmethod
    def active(cls) -> Optional["Tape"]:
        return cls._stack[-1] if cls._stack else None


def record(data, parents: Sequence[Tensor], backward_rule, op: str = "") -> Tensor:
    """Wrap an op result, attaching graph edges when gradients are needed.

    ``backward_rule(out_grad)`` must return one gradient array (or None) per
    parent, in order.
    """
    out = Tensor(data)
    if CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"non-finite values out of {op or 'op'}")
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_rule = backward_rule
        out._op = op
    tape = Tape.active()
    if tape is not None:
        tape.nodes.append(out)
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    """Parents-before-consumers ordering of the graph reachable from root."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))
    return order


def _deposit(node: Tensor, g: np.ndarray) -> None:
    # Aliasing g is fine: gradient arrays are never mutated in place.
    if not node.requires_grad:
        return
    node.grad = g if node.grad is None else node.grad + g


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    With an explicit tape the nodes are traversed exactly once in reverse
    recording order; otherwise the order is rebuilt from the graph. Gradients
    accumulate, so replaying the same pass doubles them.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    nodes = tape.nodes if tape is not None else _topo_order(loss)
    flowing: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
    for node in reversed(nodes):
        g = flowing.pop(node, None)
        if g is None:
            continue
        _deposit(node, g)
        if node._backward_rule is None:
            continue
        for parent, pg in zip(node._parents, node._backward_rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = flowing.get(parent)
            flowing[parent] = pg if prev is None else prev + pg
    # Leaves are not recorded on tapes; whatever is left flows into them here.
    for node, g in flowing.items():
        _deposit(node, g)


@dataclass(frozen=True)
class SgdConfig:
    """Plain SGD with a multiplicative step schedule.

    ``schedule`` holds (epoch_threshold, multiplier) pairs; every threshold
    at or below the current epoch applies its multiplier to the base rate.
    """

    learning_rate: float
    schedule: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        norm = tuple((int(e), float(m)) for e, m in self.schedule)
        for _, mult in norm:
            if not 0.0 < mult <= 1.0:
                raise ValueError("schedule multipliers must lie in (0, 1]")
        object.__setattr__(self, "schedule", norm)


def effective_lr(config: SgdConfig, epoch: int) -> float:
    lr = config.learning_rate
    for threshold, mult in config.schedule:
        if threshold <= epoch:
            lr *= mult
    return lr


def sgd_step(params: Iterable[Tensor], config: SgdConfig, epoch: int) -> None:
    """Apply p <- p - lr(epoch) * grad to every parameter, then clear grads."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError("sgd_step: parameter has no gradient")
    lr = effective_lr(config, epoch)
    for p in params:
        p.data -= lr * p.grad
        p.grad = None


def grad_check(f, point: Tensor, h: float = 1e-5,
               max_entries: Optional[int] = None, seed: int = 0,
               pick: str = "random") -> float:
    """Max relative error between analytic gradient and central differences.

    ``f`` maps ``point`` to a scalar Tensor and must be deterministic. The
    relative error denominator is max(|analytic|, |numeric|, 1e-8). For large
    tensors a subset of entries can be checked; ``pick`` selects either a
    seeded random subset or the entries with the largest analytic gradient
    (for deep pipelines, where near-zero coordinates sit below the noise
    floor of the finite differences themselves).
    """
    point.requires_grad = True
    point.grad = None
    out = f(point)
    if out.data.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    backward(out)
    grad = point.grad if point.grad is not None else np.zeros_like(point.data)
    analytic = grad.reshape(-1)
    flat = point.data.reshape(-1)
    n = flat.size
    if max_entries is not None and n > max_entries:
        if pick == "largest":
            idxs = np.argsort(-np.abs(analytic))[:max_entries]
        else:
            idxs = np.random.default_rng(seed).choice(n, size=max_entries, replace=False)
    else:
        idxs = np.arange(n)
    worst = 0.0
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(point).item()
        flat[i] = orig - h
        f_minus = f(point).item()
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    point.grad = None
    return worst
