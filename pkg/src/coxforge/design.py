"""Model configurations and covariate construction.

A covariate is indexed by six bits selecting which local quantities are
multiplied together for each cell ``a``:

====  ============================================
bit   factor
====  ============================================
i1    contact at the cell itself
i2    contact at the left neighbor  (x - 1)
i3    contact at the right neighbor (x + 1)
i4    contact at the lower neighbor (y - 1)
i5    contact at the upper neighbor (y + 1)
i6    gradient magnitude at the cell
====  ============================================

``x^i = prod_{j: i_j = 1} factor_j``, with out-of-grid neighbors
contributing 0 and the empty product (the all-zero index) equal to 1, so
"000000" is the intercept. A :class:`ModelSpec` holds one set of indices
``fixed`` whose effects are constant across the grid and one set
``varying`` whose effects get their own spatial field.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .grids import GridSpec, ShoeRecord

InteractionIndex = tuple[int, int, int, int, int, int]

N_BITS = 6


def index_from_string(bits: str) -> InteractionIndex:
    """Parse "100001"-style covariate indices."""
    if len(bits) != N_BITS or any(c not in "01" for c in bits):
        raise ConfigError(f"covariate index must be {N_BITS} bits of 0/1, got {bits!r}")
    return tuple(int(c) for c in bits)  # type: ignore[return-value]


def index_to_string(index: InteractionIndex) -> str:
    return "".join(str(int(b)) for b in index)


def interaction_order(index: InteractionIndex) -> int:
    """Number of factors multiplied together (0 for the intercept)."""
    return int(sum(index))


@dataclass(frozen=True)
class ModelSpec:
    """One model configuration.

    ``fixed`` lists indices with grid-constant coefficients, ``varying``
    those with per-cell coefficient fields. ``contact`` selects whether
    covariates read the continuous surface or its binarized version, and
    ``smooth`` toggles the baseline spatial field (off only for the
    uniform-rate reference model).
    """

    name: str
    fixed: tuple[InteractionIndex, ...]
    varying: tuple[InteractionIndex, ...] = ()
    contact: str = "continuous"  # 'continuous' | 'binary'
    smooth: bool = True

    def __post_init__(self) -> None:
        if self.contact not in ("continuous", "binary"):
            raise ConfigError(f"contact must be continuous|binary, got {self.contact!r}")
        if len(set(self.fixed)) != len(self.fixed):
            raise ConfigError(f"model {self.name}: duplicate fixed indices")
        if len(set(self.varying)) != len(self.varying):
            raise ConfigError(f"model {self.name}: duplicate varying indices")
        for idx in self.fixed + self.varying:
            if len(idx) != N_BITS or any(b not in (0, 1) for b in idx):
                raise ConfigError(f"model {self.name}: bad index {idx}")
        if not self.smooth and self.varying:
            raise ConfigError(
                f"model {self.name}: varying coefficients require the smooth field"
            )

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "fixed": [index_to_string(i) for i in self.fixed],
            "varying": [index_to_string(i) for i in self.varying],
            "contact": self.contact,
            "smooth": self.smooth,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelSpec":
        try:
            return cls(
                name=str(d["name"]),
                fixed=tuple(index_from_string(s) for s in d["fixed"]),
                varying=tuple(index_from_string(s) for s in d.get("varying", [])),
                contact=d.get("contact", "continuous"),
                smooth=bool(d.get("smooth", True)),
            )
        except KeyError as exc:
            raise ConfigError(f"model description missing key {exc}") from exc


def _all_indices(include_gradient: bool) -> tuple[InteractionIndex, ...]:
    """All 2^5 (or 2^6) indices in lexicographic bit order, intercept first."""
    last = (0, 1) if include_gradient else (0,)
    return tuple(
        itertools.product((0, 1), (0, 1), (0, 1), (0, 1), (0, 1), last)
    )


INTERCEPT: InteractionIndex = (0, 0, 0, 0, 0, 0)
_CENTER: InteractionIndex = (1, 0, 0, 0, 0, 0)
_GRAD: InteractionIndex = (0, 0, 0, 0, 0, 1)
_CENTER_GRAD: InteractionIndex = (1, 0, 0, 0, 0, 1)


def builtin_specs() -> dict[str, ModelSpec]:
    """The standard model battery, keyed by name.

    ``uniform`` has the intercept only and no spatial field; ``m_a`` adds
    the field; ``m_b`` uses all 32 binary-contact neighborhood products;
    the variants explore continuous contact with and without gradient
    terms and spatially varying coefficients; ``m_final`` is the full
    configuration (64 fixed products, varying fields for contact, gradient,
    and their product).
    """
    contact_only = _all_indices(include_gradient=False)  # 32 indices
    with_gradient = _all_indices(include_gradient=True)  # 64 indices
    varying_a = tuple(
        i for i in contact_only if 1 <= interaction_order(i) <= 2
    )  # 5 singles + 10 pairs
    return {
        "uniform": ModelSpec("uniform", fixed=(INTERCEPT,), smooth=False),
        "m_a": ModelSpec("m_a", fixed=(INTERCEPT,)),
        "m_b": ModelSpec("m_b", fixed=contact_only, contact="binary"),
        "variant_a": ModelSpec("variant_a", fixed=contact_only, varying=varying_a),
        "variant_b": ModelSpec("variant_b", fixed=with_gradient),
        "variant_c": ModelSpec("variant_c", fixed=with_gradient, varying=(_CENTER,)),
        "variant_d": ModelSpec(
            "variant_d", fixed=with_gradient, varying=(_CENTER, _GRAD)
        ),
        "m_final": ModelSpec(
            "m_final", fixed=with_gradient, varying=(_CENTER, _GRAD, _CENTER_GRAD)
        ),
    }


def get_spec(name: str) -> ModelSpec:
    specs = builtin_specs()
    try:
        return specs[name]
    except KeyError:
        raise ConfigError(
            f"unknown model {name!r}; built-ins: {', '.join(sorted(specs))}"
        ) from None


# ---------------------------------------------------------------------------
# covariate evaluation


def _factor_stack(contact: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """(6, ny, nx) stack of the per-cell factors, zero outside the grid."""
    c = np.asarray(contact, dtype=float)
    g = np.asarray(grad, dtype=float)
    if c.shape != g.shape:
        raise ConfigError(f"contact {c.shape} and gradient {g.shape} shapes differ")
    left = np.zeros_like(c)
    left[:, 1:] = c[:, :-1]
    right = np.zeros_like(c)
    right[:, :-1] = c[:, 1:]
    down = np.zeros_like(c)
    down[1:, :] = c[:-1, :]
    up = np.zeros_like(c)
    up[:-1, :] = c[1:, :]
    return np.stack([c, left, right, down, up, g])


def covariate_value(
    contact: np.ndarray,
    grad: np.ndarray,
    index: InteractionIndex,
    cell: tuple[int, int],
) -> float:
    """Reference (scalar) evaluation of one covariate at one cell.

    ``cell`` is (row, col). Slow by design; :func:`build_tensor` is the
    vectorized equivalent and is tested to agree with this entry by entry.
    """
    y, x = cell
    ny, nx = contact.shape
    vals = []
    neighborhood = [(0, 0), (0, -1), (0, 1), (-1, 0), (1, 0)]
    for bit, (dy, dx) in zip(index[:5], neighborhood):
        if not bit:
            continue
        yy, xx = y + dy, x + dx
        vals.append(float(contact[yy, xx]) if 0 <= yy < ny and 0 <= xx < nx else 0.0)
    if index[5]:
        vals.append(float(grad[y, x]))
    out = 1.0
    for v in vals:
        out *= v
    return out


def build_tensor(
    records: list[ShoeRecord],
    indices: tuple[InteractionIndex, ...],
    spec: ModelSpec,
    grid: GridSpec | None = None,
) -> np.ndarray:
    """Covariate values for every (shoe, cell, index), shape (S, ny*nx, K).

    Cells are flattened row-major. The contact surface used per shoe is
    either ``record.contact`` or ``record.contact_binary`` depending on
    ``spec.contact``. The grid, when given, only pins the expected cell
    count; otherwise it is taken from the first record.
    """
    n_cells = grid.n_cells if grid is not None else records[0].contact.size
    out = np.empty((len(records), n_cells, len(indices)))
    for s, rec in enumerate(records):
        contact = rec.contact if spec.contact == "continuous" else rec.contact_binary
        stack = _factor_stack(contact, rec.gradient)  # (6, ny, nx)
        flat = stack.reshape(N_BITS, n_cells)
        for k, idx in enumerate(indices):
            sel = [j for j, b in enumerate(idx) if b]
            if sel:
                out[s, :, k] = np.prod(flat[sel], axis=0)
            else:
                out[s, :, k] = 1.0
    return out
