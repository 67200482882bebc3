"""Tensor shapes and convolution/pooling extent arithmetic."""

from __future__ import annotations

from dataclasses import dataclass

from archbench.errors import DegenerateShape


@dataclass(frozen=True, order=True)
class TensorShape:
    """A single CHW feature-map shape (batch dimension omitted)."""

    channels: int
    height: int
    width: int

    def __post_init__(self):
        if min(self.channels, self.height, self.width) < 1:
            raise DegenerateShape(f"non-positive tensor shape {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def area(self) -> int:
        return self.height * self.width

    def with_channels(self, channels: int) -> "TensorShape":
        return TensorShape(channels, self.height, self.width)

    def __str__(self) -> str:
        return f"({self.channels}, {self.height}, {self.width})"


def _extent(e: int, k: int, s: int, p: int) -> int:
    out = (e + 2 * p - k) // s + 1
    if out < 1:
        raise DegenerateShape(f"extent {e} collapses to {out} (k={k}, s={s}, p={p})")
    return out


def conv_output_shape(in_shape: TensorShape, out_channels: int, k: int, s: int) -> TensorShape:
    """Output shape of a "same"-padded convolution (padding ``k // 2``).

    >>> conv_output_shape(TensorShape(3, 640, 640), 16, 3, 2)
    TensorShape(channels=16, height=320, width=320)
    """
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if s < 1:
        raise ValueError(f"stride must be positive, got {s}")
    if out_channels < 1:
        raise DegenerateShape(f"output channels must be positive, got {out_channels}")
    p = k // 2
    return TensorShape(out_channels, _extent(in_shape.height, k, s, p), _extent(in_shape.width, k, s, p))


def pool_output_shape(in_shape: TensorShape, k: int, s: int) -> TensorShape:
    # (k - 1) // 2 equals k // 2 for odd kernels and gives the unpadded 2x2/s2 VGG pool.
    p = (k - 1) // 2
    return TensorShape(in_shape.channels, _extent(in_shape.height, k, s, p), _extent(in_shape.width, k, s, p))
