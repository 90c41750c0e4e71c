"""Intersectional subgroup construction.

Subgroups are the cells of the Cartesian product of all sensitive
attributes. Each sample gets a deterministic mixed-radix group id
(attribute 0 is the most significant digit), and the table keeps a
boolean mask plus a size for every cell — including empty ones, which
stay visible so downstream consumers can exclude them explicitly
instead of silently.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ValidationError


@dataclass(frozen=True)
class SensitiveAttributes:
    """Per-sample categorical codes for m sensitive attributes.

    codes: int array of shape (n, m), entry (i, j) in [0, cardinalities[j]).
    cardinalities: number of levels per attribute.
    """

    codes: np.ndarray
    cardinalities: tuple[int, ...]

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.int64)
        if codes.ndim != 2:
            raise ValidationError(f"codes must be 2-D (n, m), got shape {codes.shape}")
        if len(self.cardinalities) != codes.shape[1]:
            raise ValidationError(
                f"{codes.shape[1]} attribute columns but "
                f"{len(self.cardinalities)} cardinalities")
        if any(c < 1 for c in self.cardinalities):
            raise ValidationError("every cardinality must be >= 1")
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "cardinalities", tuple(int(c) for c in self.cardinalities))

    @property
    def n_samples(self) -> int:
        return self.codes.shape[0]

    @property
    def n_attributes(self) -> int:
        return self.codes.shape[1]


@dataclass(frozen=True)
class GroupTable:
    """Intersectional grouping of n samples into prod(cardinalities) cells."""

    group_id: np.ndarray          # (n,) mixed-radix cell index per sample
    group_count: int              # total number of cells, empty ones included
    masks: np.ndarray             # (G, n) boolean membership
    sizes: np.ndarray             # (G,) member counts
    cardinalities: tuple[int, ...]

    @property
    def empty_groups(self) -> np.ndarray:
        """Indices of cells with no members."""
        return np.flatnonzero(self.sizes == 0)

    @property
    def nonempty_groups(self) -> np.ndarray:
        return np.flatnonzero(self.sizes > 0)


def encode_codes(codes: np.ndarray, cardinalities: tuple[int, ...]) -> np.ndarray:
    """Mixed-radix encode attribute code tuples; attribute 0 most significant."""
    codes = np.asarray(codes, dtype=np.int64)
    radix = np.ones(len(cardinalities), dtype=np.int64)
    for j in range(len(cardinalities) - 2, -1, -1):
        radix[j] = radix[j + 1] * cardinalities[j + 1]
    return codes @ radix


def decode_group_id(group_id: np.ndarray, cardinalities: tuple[int, ...]) -> np.ndarray:
    """Inverse of encode_codes."""
    gid = np.asarray(group_id, dtype=np.int64).copy()
    m = len(cardinalities)
    out = np.empty(gid.shape + (m,), dtype=np.int64)
    for j in range(m - 1, -1, -1):
        out[..., j] = gid % cardinalities[j]
        gid //= cardinalities[j]
    return out


def build_intersection(attrs: SensitiveAttributes) -> GroupTable:
    """Build the Cartesian-product group table for the given attributes.

    Empty cells are retained with size 0 (callers decide how to treat
    them); an out-of-range code is reported with the offending sample
    and attribute.
    """
    codes, cards = attrs.codes, attrs.cardinalities
    for j, card in enumerate(cards):
        bad = np.flatnonzero((codes[:, j] < 0) | (codes[:, j] >= card))
        if bad.size:
            i = int(bad[0])
            raise ValidationError(
                f"sample {i}: attribute {j} code {int(codes[i, j])} "
                f"outside [0, {card})")
    group_count = 1
    for card in cards:
        group_count *= card
    group_id = encode_codes(codes, cards)
    masks = group_id[None, :] == np.arange(group_count)[:, None]
    sizes = masks.sum(axis=1)
    return GroupTable(group_id=group_id, group_count=group_count,
                      masks=masks, sizes=sizes, cardinalities=cards)


def soft_membership(scores: np.ndarray, tau_g: float, gamma_g: float) -> np.ndarray:
    """Piecewise-linear relaxation of membership indicators.

    Maps raw membership scores through the same clipped ramp used by the
    fairness surrogates: 0 below tau_g - gamma_g, 1 above tau_g + gamma_g,
    linear in between. With 0/1 scores and a band narrower than the
    distance to either end this reproduces hard membership exactly.
    """
    if gamma_g <= 0:
        raise ParameterError(f"gamma_g must be > 0, got {gamma_g}")
    from .fairloss import ccr  # shared ramp; local import breaks the module cycle
    return ccr(np.asarray(scores, dtype=np.float64), tau_g, gamma_g)


def marginal_attribute_groups(attrs: SensitiveAttributes, attribute: int) -> GroupTable:
    """Group table over a single attribute's own levels, ignoring the rest."""
    if not 0 <= attribute < attrs.n_attributes:
        raise ValidationError(
            f"attribute index {attribute} out of range for m={attrs.n_attributes}")
    single = SensitiveAttributes(
        codes=attrs.codes[:, [attribute]],
        cardinalities=(attrs.cardinalities[attribute],))
    return build_intersection(single)


def restrict_groups(table: GroupTable, indices: np.ndarray) -> GroupTable:
    """The same cells over a sample subset; cells may become empty."""
    indices = np.asarray(indices)
    masks = table.masks[:, indices]
    return GroupTable(group_id=table.group_id[indices],
                      group_count=table.group_count,
                      masks=masks, sizes=masks.sum(axis=1),
                      cardinalities=table.cardinalities)
