"""Named fixture geometries used by the tests, the CLI and the experiments."""

from __future__ import annotations

from .geometry import Box, DomainSpec, GridDomain, build_augmented_domain


def two_half_cube_spec(dim: int = 3, r0: float = 1.0) -> DomainSpec:
    """Unit box split at the midplane of the last axis; Sigma is the bottom face."""
    lo = (0.0,) * dim
    hi = (1.0,) * dim
    mid_hi = (1.0,) * (dim - 1) + (0.5,)
    mid_lo = (0.0,) * (dim - 1) + (0.5,)
    return DomainSpec(
        dim=dim, box=Box(lo, hi),
        subdomains=(Box(lo, mid_hi), Box(mid_lo, hi)),
        sigma_axis=dim - 1, sigma_side="lo", r0=r0,
    )


def unit_cube_spec(dim: int = 3, r0: float = 1.0) -> DomainSpec:
    lo, hi = (0.0,) * dim, (1.0,) * dim
    return DomainSpec(dim=dim, box=Box(lo, hi), subdomains=(Box(lo, hi),),
                      sigma_axis=dim - 1, sigma_side="lo", r0=r0)


def squares_2x2_spec(r0: float = 0.75) -> DomainSpec:
    """Four squares of side 1/2 numbered counter-clockwise from the origin."""
    return DomainSpec(
        dim=2, box=Box((0.0, 0.0), (1.0, 1.0)),
        subdomains=(
            Box((0.0, 0.0), (0.5, 0.5)),
            Box((0.5, 0.0), (1.0, 0.5)),
            Box((0.5, 0.5), (1.0, 1.0)),
            Box((0.0, 0.5), (0.5, 1.0)),
        ),
        sigma_axis=1, sigma_side="lo", r0=r0,
        sigma_lo=(0.0, 0.0), sigma_hi=(0.5, 0.0),
    )


FIXTURES = {
    "two-half-cube": two_half_cube_spec,
    "unit-cube": unit_cube_spec,
    "squares-2x2": lambda dim=2, r0=0.75: squares_2x2_spec(r0),
}


def fixture_spec(name: str, dim: int | None = None) -> DomainSpec:
    try:
        make = FIXTURES[name]
    except KeyError:
        raise ValueError(f"unknown fixture {name!r}; choose from {sorted(FIXTURES)}") from None
    return make() if dim is None else make(dim=dim)


def build_fixture(name: str, h: float, dim: int | None = None) -> GridDomain:
    return build_augmented_domain(fixture_spec(name, dim), h)
