"""Receptive-field arithmetic for conv/pool chains."""

from dataclasses import dataclass, field

from .errors import ConfigurationError


@dataclass(frozen=True)
class LayerGeom:
    kernel: int
    stride: int = 1
    pad: int = 0
    kind: str = "conv"  # "conv" or "pool"
    name: str = ""


@dataclass(frozen=True)
class NetworkGeometry:
    """An ordered chain of (kernel, stride, pad) layers applied to a square input.

    Invariants checked on construction: every layer has kernel, stride ≥ 1,
    pad ≥ 0, and the spatial side stays ≥ 1 through the whole chain.
    """

    layers: tuple
    input_side: int
    channels: tuple = field(default=None)

    def __post_init__(self):
        layers = tuple(l if isinstance(l, LayerGeom) else LayerGeom(*l) for l in self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ConfigurationError("geometry needs at least one layer")
        if self.input_side < 1:
            raise ConfigurationError(f"input_side must be positive, got {self.input_side}")
        for i, l in enumerate(layers):
            if l.kernel < 1 or l.stride < 1 or l.pad < 0:
                raise ConfigurationError(f"layer {i} has invalid kernel/stride/pad {l}")
            if l.kind not in ("conv", "pool"):
                raise ConfigurationError(f"layer {i} has unknown kind {l.kind!r}")
        sides = self.output_sides()
        for i, s in enumerate(sides):
            if s < 1:
                raise ConfigurationError(
                    f"layer {i} ({layers[i].name or layers[i].kind}) collapses the input to side {s}"
                )
        if self.channels is not None:
            object.__setattr__(self, "channels", tuple(self.channels))
            n_conv = sum(l.kind == "conv" for l in layers)
            if len(self.channels) != n_conv:
                raise ConfigurationError(
                    f"{len(self.channels)} channel widths given for {n_conv} conv layers"
                )

    def output_sides(self):
        sides, n = [], self.input_side
        for l in self.layers:
            n = (n + 2 * l.pad - l.kernel) // l.stride + 1
            sides.append(n)
        return sides

    @property
    def output_side(self):
        return self.output_sides()[-1]

    def with_input(self, side):
        return NetworkGeometry(self.layers, side, self.channels)

    def layer_names(self):
        return [l.name or f"layer{i + 1}" for i, l in enumerate(self.layers)]

    def to_dict(self):
        return {
            "input_side": self.input_side,
            "layers": [
                {"kernel": l.kernel, "stride": l.stride, "pad": l.pad, "kind": l.kind, "name": l.name}
                for l in self.layers
            ],
            "channels": list(self.channels) if self.channels is not None else None,
        }

    @classmethod
    def from_dict(cls, d):
        layers = tuple(
            LayerGeom(
                int(l["kernel"]),
                int(l.get("stride", 1)),
                int(l.get("pad", 0)),
                l.get("kind", "conv"),
                l.get("name", ""),
            )
            for l in d["layers"]
        )
        ch = d.get("channels")
        return cls(layers, int(d["input_side"]), tuple(ch) if ch is not None else None)


def receptive_field(geom, layer_index=None):
    """Receptive field of one unit of layer ``layer_index`` (default: last).

    Returns:
        (rf, stride, offset): the side of the input-pixel square seen by a
        unit, the cumulative stride in pixels, and the input-pixel coordinate
        of the center of output unit (0, 0). Padding shifts the offset; the
        centre of unit i is ``offset + stride * i``.
    """
    n = len(geom.layers)
    if layer_index is None:
        layer_index = n - 1
    if not 0 <= layer_index < n:
        raise IndexError(f"layer_index {layer_index} outside chain of {n} layers")
    rf, jump, start = 1, 1, 0.0
    for l in geom.layers[: layer_index + 1]:
        rf += (l.kernel - 1) * jump
        start += ((l.kernel - 1) / 2 - l.pad) * jump
        jump *= l.stride
    return rf, jump, start


def crop_receptive_field(geom, crop_side, layer_index=None):
    """Input-pixel width covered by a crop_side×crop_side window of units."""
    rf, stride, _ = receptive_field(geom, layer_index)
    return rf + stride * (crop_side - 1)


def unit_centers(geom, layer_index=None):
    """Input-pixel centers of the output units along one axis."""
    _, stride, offset = receptive_field(geom, layer_index)
    side = geom.output_sides()[layer_index if layer_index is not None else -1]
    return [offset + stride * i for i in range(side)]


def rf_table(geom):
    """Rows of (name, output side, rf, stride, offset) for every layer."""
    sides = geom.output_sides()
    rows = []
    for i, name in enumerate(geom.layer_names()):
        rf, stride, offset = receptive_field(geom, i)
        rows.append((name, sides[i], rf, stride, offset))
    return rows


def format_rf_table(geom):
    lines = []
    for name, side, rf, stride, offset in rf_table(geom):
        lines.append(f"{name}: rf={rf} stride={stride} offset={offset:g} side={side}")
    return "\n".join(lines) + "\n"


def caffenet_geometry(input_side=454, padded=True):
    """CaffeNet conv1..conv5 with its pooling layers.

    With ``padded=False`` the conv2..conv5 paddings are dropped; the
    receptive field and stride are unchanged but unit (0, 0) is then centred
    at (rf − 1) / 2.
    """
    p2, p3 = (2, 1) if padded else (0, 0)
    layers = (
        LayerGeom(11, 4, 0, "conv", "conv1"),
        LayerGeom(3, 2, 0, "pool", "pool1"),
        LayerGeom(5, 1, p2, "conv", "conv2"),
        LayerGeom(3, 2, 0, "pool", "pool2"),
        LayerGeom(3, 1, p3, "conv", "conv3"),
        LayerGeom(3, 1, p3, "conv", "conv4"),
        LayerGeom(3, 1, p3, "conv", "conv5"),
    )
    return NetworkGeometry(layers, input_side, (96, 256, 384, 384, 256))


def desk_geometry(input_side=64):
    """Four conv layers, cumulative stride 4, 64×64 input → 13×13 grid, rf 19."""
    layers = (
        LayerGeom(5, 1, 0, "conv", "conv1"),
        LayerGeom(3, 2, 1, "conv", "conv2"),
        LayerGeom(3, 2, 1, "conv", "conv3"),
        LayerGeom(3, 1, 0, "conv", "conv4"),
    )
    return NetworkGeometry(layers, input_side, (8, 16, 32, 32))
