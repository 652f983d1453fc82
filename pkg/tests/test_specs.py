import pytest

from vxadapt.exceptions import VxError
from vxadapt.specs import (
    CONV,
    CONV3D,
    DECONV,
    DECONV3D,
    DENSE,
    LayerSpec,
    format_layer_specs,
    parse_layer_spec,
)
from vxadapt.testing import assert_error

# -----------------------------------------------------------------------------


def test_parse():
    specs = parse_layer_spec("C1(32,4)-C2(64,4)-FC1(512)-DC3(32,4)")

    assert specs == (
        LayerSpec(CONV, 32, 4),
        LayerSpec(CONV, 64, 4),
        LayerSpec(DENSE, 512),
        LayerSpec(DECONV, 32, 4),
    )


def test_parse_volumetric():
    specs = parse_layer_spec("C1^{3D}(32,4)-DC2^{3D}(8,3,1)")

    assert specs == (
        LayerSpec(CONV3D, 32, 4),
        LayerSpec(DECONV3D, 8, 3, stride=1),
    )
    assert [spec.rank for spec in specs] == [3, 3]
    assert [spec.transposed for spec in specs] == [False, True]


def test_parse_empty():
    assert parse_layer_spec("") == ()
    assert parse_layer_spec("  ") == ()


def test_parse_ignores_whitespace():
    assert parse_layer_spec(" C(8, 4) - FC(16) ") == (
        LayerSpec(CONV, 8, 4),
        LayerSpec(DENSE, 16),
    )


def test_dense_has_no_rank():
    spec = LayerSpec(DENSE, 16)

    assert spec.is_dense
    assert spec.rank is None
    assert not spec.transposed


def test_format():
    text = "C(8,4)-DC^{3D}(16,3,1)-FC(64)"
    assert format_layer_specs(parse_layer_spec(text)) == text


def test_format_drops_numbering():
    assert format_layer_specs(parse_layer_spec("C1(8,4)-FC2(9)")) == (
        "C(8,4)-FC(9)"
    )


# -----------------------------------------------------------------------------


@pytest.mark.parametrize(
    ("text", "code"),
    (
        ("X(1)", "invalid_spec.token"),
        ("C(32)", "invalid_spec.token"),
        ("C(32,4", "invalid_spec.token"),
        ("C(1,2,3,4)", "invalid_spec.token"),
        ("FC^{3D}(4)", "invalid_spec.token"),
        ("C(0,4)", "invalid_spec.argument"),
        ("C(a,4)", "invalid_spec.argument"),
        ("FC(3,4)", "invalid_spec.dense_kernel"),
        ("C(8,4)--FC(3)", "invalid_spec.token"),
    ),
)
def test_parse_errors(text, code):
    with pytest.raises(VxError) as excinfo:
        parse_layer_spec(text)

    assert_error(excinfo, 1, [{"code": code}])


@pytest.mark.parametrize(
    ("args", "code"),
    (
        (("pool", 3, 2), "invalid_spec.kind"),
        ((CONV, 0, 3), "invalid_spec.width"),
        ((CONV, 8, None), "invalid_spec.kernel_size"),
        ((DENSE, 8, 3), "invalid_spec.dense_kernel"),
        ((CONV, 8, 3, 0), "invalid_spec.stride"),
    ),
)
def test_layer_spec_errors(args, code):
    with pytest.raises(VxError) as excinfo:
        LayerSpec(*args)

    assert_error(excinfo, 1, [{"code": code}])
