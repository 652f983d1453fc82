import marshmallow.utils
from marshmallow import ValidationError, fields

from .exceptions import VxError
from .specs import format_layer_specs, parse_layer_spec

# -----------------------------------------------------------------------------


class DelimitedList(fields.List):
    """List that also loads from a comma-delimited string.

    Config files and CSV cells hold lists such as ``0.3,0.5,0.7`` or
    ``1,16,16``; the same field loads those and plain lists.

    :param Field cls_or_instance: A field class or instance.
    :param str delimiter: Delimiter between values.
    :param bool as_string: Dump values to a delimited string.
    """

    delimiter = ","

    def __init__(
        self, cls_or_instance, delimiter=None, as_string=False, **kwargs
    ):
        super().__init__(cls_or_instance, **kwargs)

        self.delimiter = delimiter or self.delimiter
        self.as_string = as_string

    def _serialize(self, value, attr, obj, **kwargs):
        ret = super()._serialize(value, attr, obj, **kwargs)
        if self.as_string and ret is not None:
            return self.delimiter.join(format(each) for each in ret)

        return ret

    def _deserialize(self, value, attr, data, **kwargs):
        if marshmallow.utils.is_iterable_but_not_string(value):
            ret = value
        else:
            try:
                ret = [
                    each.strip()
                    for each in value.split(self.delimiter)
                    if each.strip()
                ]
            except AttributeError as error:
                raise self.make_error("invalid") from error

        return tuple(super()._deserialize(ret, attr, data, **kwargs))


class LayerSpecs(fields.Field):
    """A topology in layer notation, loaded to a tuple of layer specs."""

    default_error_messages = {"invalid": "Not a valid topology: {detail}"}

    def _serialize(self, value, attr, obj, **kwargs):
        if value is None:
            return None
        return format_layer_specs(value)

    def _deserialize(self, value, attr, data, **kwargs):
        if not isinstance(value, str):
            raise self.make_error("invalid", detail="expected a string")
        try:
            return parse_layer_spec(value)
        except VxError as e:
            raise ValidationError(
                self.error_messages["invalid"].format(
                    detail=e.errors[0].get("detail", e.code)
                )
            ) from e
