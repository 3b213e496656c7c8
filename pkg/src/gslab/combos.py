"""Augmentation combination space: enumeration, spec strings and parsing.

A spec string is a comma-separated token list whose first token is a base
crop, e.g. ``"randomcrop224,morpho_erosion,gaussianblur"``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from itertools import combinations

from gslab import augment as A
from gslab.errors import ParseError

PRIMITIVES = (
    "morpho_erosion",
    "morpho_dilation",
    "affine",
    "colorjitter",
    "hflip",
    "invert",
    "gaussianblur",
    "gray",
)
BASE_TOKEN = "randomcrop224"
SIMCLR_BASE_TOKEN = "randomcrop198"

_CROP_RE = re.compile(r"^randomcrop(\d+)$")


@dataclass(frozen=True)
class AugSpec:
    names: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if not self.names:
            raise ParseError("empty augmentation spec")
        if not _CROP_RE.match(self.names[0]):
            raise ParseError(f"spec must start with a randomcrop<N> token, got {self.names[0]!r}")
        if len(set(self.names)) != len(self.names):
            raise ParseError(f"duplicate token in {','.join(self.names)!r}")
        for tok in self.names[1:]:
            if tok not in PRIMITIVES:
                raise ParseError(f"unknown augmentation token {tok!r}")

    @property
    def order(self) -> int:
        return len(self.names)

    @property
    def crop_suffix(self) -> int:
        return int(_CROP_RE.match(self.names[0]).group(1))

    def format(self) -> str:
        return ",".join(self.names)

    def __str__(self) -> str:
        return self.format()

    def with_base(self, base: str) -> "AugSpec":
        return AugSpec((base,) + self.names[1:])


def enumerate_combinations(base: str = BASE_TOKEN, primitives=PRIMITIVES, max_extra: int = 3) -> list[AugSpec]:
    """Base crop plus every subset of ``primitives`` of size 0..max_extra.

    Subsets keep the primitives' canonical order; output is grouped by size,
    then lexicographic in primitive index.
    """
    primitives = tuple(primitives)
    if len(set(primitives)) != len(primitives):
        raise ValueError("duplicate primitive tokens")
    if not 0 <= max_extra <= len(primitives):
        raise ValueError(f"max_extra must be in [0, {len(primitives)}]")
    specs = []
    for size in range(max_extra + 1):
        for subset in combinations(primitives, size):
            specs.append(AugSpec((base,) + subset))
    return specs


def parse_tokens(s: str) -> AugSpec:
    if s is None or not s.strip():
        raise ParseError("empty augmentation spec")
    tokens = [t.strip() for t in s.split(",")]
    if any(not t for t in tokens):
        raise ParseError(f"empty token in {s!r}")
    return AugSpec(tokens)


def op_for_token(token: str, geometry: A.Geometry) -> A.AugOp:
    m = _CROP_RE.match(token)
    if m:
        return A.RandomCrop(geometry.crop_for_token(int(m.group(1))))
    k = geometry.morph_kernel
    table = {
        "morpho_erosion": lambda: A.Erosion((k, k)),
        "morpho_dilation": lambda: A.Dilation((k, k)),
        "affine": A.Affine,
        "colorjitter": A.ColorJitter,
        "hflip": A.HFlip,
        "invert": A.Invert,
        "gaussianblur": lambda: A.GaussianBlur(tuple(geometry.blur_limit)),
        "gray": A.Gray,
    }
    if token not in table:
        raise ParseError(f"unknown augmentation token {token!r}")
    return table[token]()


def parse_spec(s, geometry: A.Geometry = A.DESK_GEOMETRY, method: str = "baseline", seed: int = 0,
               pixel_probability: float = 0.5, spatial_probability: float = 0.5) -> A.AugPipeline:
    """Build the training pipeline for a spec string.

    resize -> tokens (crop p=1, other ops gated) -> tail -> normalize, where
    the tail is a resize to ``geometry.final_side`` for SimCLR and a center
    crop to ``geometry.crop_side`` otherwise.
    """
    spec = s if isinstance(s, AugSpec) else parse_tokens(s)
    steps = [(A.Resize(geometry.resize_side), 1.0)]
    for tok in spec.names:
        op = op_for_token(tok, geometry)
        if isinstance(op, A.RandomCrop):
            p = 1.0
        else:
            p = pixel_probability if op.kind == "pixel" else spatial_probability
        steps.append((op, p))
    if method == "simclr":
        steps.append((A.Resize(geometry.final_side), 1.0))
    else:
        steps.append((A.CenterCrop(geometry.crop_side), 1.0))
    steps.append((A.Normalize(), 1.0))
    return A.AugPipeline(steps, seed=seed)


def write_specs(specs, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for spec in specs:
            fh.write(spec.format() + "\n")


def read_specs(path) -> list[AugSpec]:
    with open(path, encoding="utf-8") as fh:
        return [parse_tokens(line) for line in fh if line.strip()]


def spec_order_key(spec: str) -> tuple:
    """Sort key reproducing the enumeration order for any valid spec string."""
    names = parse_tokens(spec).names
    return (len(names), tuple(PRIMITIVES.index(t) for t in names[1:]))
