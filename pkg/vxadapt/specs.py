"""The layer notation used to describe network topologies.

A topology is a dash-separated list of tokens such as
``C1(32,4)-C2(64,4)-FC1(512)``: ``C`` is a strided convolution, ``DC`` a
transposed convolution and ``FC`` a dense layer. The digits after the letters
number the layers and carry no meaning. A ``^{3D}`` marker selects the
volumetric variant of a convolution, e.g. ``DC1^{3D}(128,4)``.
"""

import re
from dataclasses import dataclass

from .exceptions import VxError

# -----------------------------------------------------------------------------

CONV = "conv"
DECONV = "deconv"
CONV3D = "conv3d"
DECONV3D = "deconv3d"
DENSE = "dense"

KINDS = (CONV, DECONV, CONV3D, DECONV3D, DENSE)

DEFAULT_STRIDE = 2

TOKEN_PATTERN = re.compile(
    r"^(?P<letters>DC|C|FC)\d*(?P<volumetric>\^\{3D\}|\^3D)?"
    r"\((?P<args>[^()]*)\)$"
)

_KIND_BY_LETTERS = {
    ("C", False): CONV,
    ("C", True): CONV3D,
    ("DC", False): DECONV,
    ("DC", True): DECONV3D,
}

_LETTERS_BY_KIND = {
    kind: letters for letters, kind in _KIND_BY_LETTERS.items()
}

# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a topology.

    For convolutions `width` is the kernel count; for dense layers it is the
    output width and `kernel_size` is ``None``.
    """

    kind: str
    width: int
    kernel_size: int = None
    stride: int = DEFAULT_STRIDE

    def __post_init__(self):
        if self.kind not in KINDS:
            raise VxError.data(
                "invalid_spec.kind", f"unknown layer kind {self.kind!r}"
            )
        if self.width < 1:
            raise VxError.data(
                "invalid_spec.width", f"width must be positive, got {self}"
            )
        if self.kind == DENSE:
            if self.kernel_size is not None:
                raise VxError.data(
                    "invalid_spec.dense_kernel",
                    "dense layers take no kernel size",
                )
        elif self.kernel_size is None or self.kernel_size < 1:
            raise VxError.data(
                "invalid_spec.kernel_size",
                f"{self.kind} needs a positive kernel size",
            )
        if self.stride < 1:
            raise VxError.data(
                "invalid_spec.stride", f"stride must be positive, got {self}"
            )

    @property
    def is_dense(self):
        return self.kind == DENSE

    @property
    def transposed(self):
        return self.kind in (DECONV, DECONV3D)

    @property
    def rank(self):
        """Spatial rank of a convolution; ``None`` for dense layers."""
        if self.is_dense:
            return None
        return 3 if self.kind in (CONV3D, DECONV3D) else 2

    def __str__(self):
        if self.is_dense:
            return f"FC({self.width})"

        letters, volumetric = _LETTERS_BY_KIND[self.kind]
        marker = "^{3D}" if volumetric else ""
        args = f"{self.width},{self.kernel_size}"
        if self.stride != DEFAULT_STRIDE:
            args += f",{self.stride}"
        return f"{letters}{marker}({args})"


# -----------------------------------------------------------------------------


def _parse_int(text, token):
    try:
        value = int(text)
    except ValueError:
        value = 0
    if value < 1:
        raise VxError.data(
            "invalid_spec.argument",
            f"{text.strip()!r} in {token!r} is not a positive integer",
            token=token,
        )
    return value


def parse_layer_token(token):
    token = token.strip()
    match = TOKEN_PATTERN.match(token)
    if not match:
        raise VxError.data(
            "invalid_spec.token",
            f"malformed layer token {token!r}",
            token=token,
        )

    args = [_parse_int(arg, token) for arg in match.group("args").split(",")]
    letters = match.group("letters")

    if letters == "FC":
        if match.group("volumetric"):
            raise VxError.data(
                "invalid_spec.token",
                f"dense layer {token!r} has no volumetric variant",
                token=token,
            )
        if len(args) != 1:
            raise VxError.data(
                "invalid_spec.dense_kernel",
                f"dense layer {token!r} takes a width only",
                token=token,
            )
        return LayerSpec(DENSE, args[0])

    if len(args) not in (2, 3):
        raise VxError.data(
            "invalid_spec.token",
            f"{token!r} needs a kernel count and size, and optionally a "
            "stride",
            token=token,
        )
    kind = _KIND_BY_LETTERS[(letters, bool(match.group("volumetric")))]
    return LayerSpec(kind, *args)


def parse_layer_spec(text):
    """Parse a dash-separated topology into a tuple of :py:class:`LayerSpec`.

    An empty string parses to an empty tuple.

    :raises VxError: On a malformed token or a dense layer given a kernel
        size.
    """
    text = text.strip()
    if not text:
        return ()
    return tuple(parse_layer_token(token) for token in text.split("-"))


def format_layer_specs(specs):
    return "-".join(str(spec) for spec in specs)
