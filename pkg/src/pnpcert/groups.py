"""Finite groups of affine isometries acting on flattened vectors."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from pnpcert.errors import InvalidParameterError, ShapeError


class Element(NamedTuple):
    """T(x) = a @ x + c with ``a`` orthogonal."""

    a: np.ndarray
    c: np.ndarray


def apply_transform(g: Element, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != g.a.shape[0]:
        raise ShapeError(f"element acts on R^{g.a.shape[0]}, got shape {x.shape}")
    return x @ g.a.T + g.c


def inverse_transform(g: Element, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    return (u - g.c) @ g.a


def compose(g: Element, h: Element) -> Element:
    """g after h."""
    return Element(g.a @ h.a, g.a @ h.c + g.c)


def inverse(g: Element) -> Element:
    return Element(g.a.T, -g.a.T @ g.c)


@dataclass(frozen=True, eq=False)
class GroupAction:
    """A finite group with uniform (Haar) weights.

    Closure, inverses and isometry of each linear part are verified at
    construction.
    """

    dim: int
    elements: tuple
    name: str = "custom"

    def __post_init__(self):
        elems = []
        for a, c in self.elements:
            a = np.array(a, dtype=float).reshape(self.dim, self.dim)
            c = np.zeros(self.dim) if c is None else np.array(c, dtype=float).reshape(self.dim)
            if np.max(np.abs(a.T @ a - np.eye(self.dim))) > 1e-12:
                raise InvalidParameterError("group element has a non-isometric linear part")
            a.setflags(write=False)
            c.setflags(write=False)
            elems.append(Element(a, c))
        if not elems:
            raise InvalidParameterError("group must contain at least one element")
        object.__setattr__(self, "elements", tuple(elems))
        if self.find(Element(np.eye(self.dim), np.zeros(self.dim))) is None:
            raise InvalidParameterError("group has no identity element")
        for g in elems:
            if self.find(inverse(g)) is None:
                raise InvalidParameterError("group is not closed under inversion")
            for h in elems:
                if self.find(compose(g, h)) is None:
                    raise InvalidParameterError("group is not closed under composition")

    def __len__(self) -> int:
        return len(self.elements)

    @property
    def weights(self) -> np.ndarray:
        return np.full(len(self.elements), 1.0 / len(self.elements))

    def find(self, g: Element, tol: float = 1e-10) -> int | None:
        for i, h in enumerate(self.elements):
            if np.max(np.abs(h.a - g.a)) <= tol and np.max(np.abs(h.c - g.c), initial=0.0) <= tol:
                return i
        return None

    def identity_index(self) -> int:
        return self.find(Element(np.eye(self.dim), np.zeros(self.dim)))

    def to_dict(self) -> dict:
        if self.name != "custom":
            kind, _, rest = self.name.partition(":")
            params = dict(p.split("=") for p in rest.split(",") if p)
            return {"kind": kind, **{k: int(v) for k, v in params.items()}}
        return {
            "kind": "custom",
            "dim": self.dim,
            "elements": [{"a": g.a.tolist(), "c": g.c.tolist()} for g in self.elements],
        }

    @classmethod
    def from_dict(cls, doc: dict, dim: int | None = None) -> "GroupAction":
        kind = doc["kind"]
        if kind == "custom":
            return cls(
                int(doc["dim"]),
                tuple((e["a"], e.get("c")) for e in doc["elements"]),
            )
        if kind == "dihedral_image":
            return dihedral_image(int(doc["h"]), int(doc["w"]))
        n = int(doc.get("dim", dim if dim is not None else 0))
        builders = {
            "sign_flip": sign_flip,
            "coordinate_permutations": coordinate_permutations,
            "cyclic_shift": cyclic_shift,
            "trivial": trivial,
        }
        if kind not in builders:
            raise InvalidParameterError(f"unknown group kind {kind!r}")
        return builders[kind](n)


def _perm_matrix(perm) -> np.ndarray:
    n = len(perm)
    m = np.zeros((n, n))
    m[np.arange(n), perm] = 1.0
    return m


def trivial(n: int) -> GroupAction:
    return GroupAction(n, ((np.eye(n), None),), name=f"trivial:dim={n}")


def sign_flip(n: int) -> GroupAction:
    """{Id, -Id} on R^n."""
    return GroupAction(n, ((np.eye(n), None), (-np.eye(n), None)), name=f"sign_flip:dim={n}")


def coordinate_permutations(n: int) -> GroupAction:
    elems = tuple((_perm_matrix(p), None) for p in itertools.permutations(range(n)))
    return GroupAction(n, elems, name=f"coordinate_permutations:dim={n}")


def cyclic_shift(n: int) -> GroupAction:
    elems = tuple((_perm_matrix(np.roll(np.arange(n), s)), None) for s in range(n))
    return GroupAction(n, elems, name=f"cyclic_shift:dim={n}")


def dihedral_image(h: int, w: int) -> GroupAction:
    """Rotations by multiples of 90 degrees and their flips on an h x w grid (row-major)."""
    if h != w:
        raise InvalidParameterError(f"dihedral group needs a square grid, got {h}x{w}")
    idx = np.arange(h * w).reshape(h, w)
    elems = []
    for flip in (False, True):
        base = idx[:, ::-1] if flip else idx
        for k in range(4):
            # output pixel j takes input pixel src[j]
            src = np.rot90(base, k).ravel()
            elems.append((_perm_matrix(src), None))
    return GroupAction(h * w, tuple(elems), name=f"dihedral_image:h={h},w={w}")


def make_group(kind: str, *args: int) -> GroupAction:
    builders = {
        "sign_flip": sign_flip,
        "coordinate_permutations": coordinate_permutations,
        "dihedral_image": dihedral_image,
        "cyclic_shift": cyclic_shift,
        "trivial": trivial,
    }
    if kind not in builders:
        raise InvalidParameterError(f"unknown group kind {kind!r}")
    return builders[kind](*args)


@dataclass(frozen=True)
class InvarianceReport:
    max_violation: float
    worst_element: int
    passed: bool


def check_invariance(prior, group: GroupAction, samples: int, tol: float, seed: int = 0) -> InvarianceReport:
    """max over sampled x and all g of |log p(T_g x) - log p(x)|."""
    if samples < 1:
        raise InvalidParameterError("samples must be >= 1")
    xs = prior.sample(seed, samples)
    base = prior.log_density(xs)
    worst, worst_g = 0.0, group.identity_index()
    for i, g in enumerate(group.elements):
        v = float(np.max(np.abs(prior.log_density(apply_transform(g, xs)) - base)))
        if v > worst:
            worst, worst_g = v, i
    return InvarianceReport(worst, worst_g, worst <= tol)
