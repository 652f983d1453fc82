"""Training configuration: the dataclass, its schema and the file format.

Config files hold one ``key = value`` pair per line. ``#`` starts a comment
and blank lines are ignored. Keys are :py:class:`TrainConfig` field names::

    # desk.cfg
    preset = desk
    batch_size = 16
    phi2 = 0.7
"""

import logging
from dataclasses import dataclass

from marshmallow import (
    RAISE,
    Schema,
    ValidationError,
    fields,
    post_load,
    validate,
)

from .dataset import DatasetConfig
from .exceptions import USAGE_ERROR, VxError
from .networks import PRESETS, get_preset

logger = logging.getLogger(__name__)

# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "desk"
    batch_size: int = 32

    lr_g: float = 0.005
    lr_d: float = 0.001
    decay_g: float = 0.995
    decay_d: float = 0.995
    lr_decay_every: int = 1

    # None takes the preset's budget.
    steps_stage1: int = None
    steps_stage2: int = None
    steps_joint: int = None

    phi2: float = 0.7
    phi3: float = 0.2
    lambda2: float = 0.01
    lambda3: float = 0.01
    gamma2: float = 1.15
    gamma3: float = 1.15
    slope: float = 0.2

    seed: int = 0
    checkpoint_every: int = 1000
    prefetch: int = 2

    data_dir: str = None
    shapes: int = 40
    views: int = 24
    split: float = 0.7
    real_fraction: float = 0.5

    reuse_fc3: bool = False
    literal_s_update: bool = False
    adaptation: bool = True

    @property
    def budgets(self):
        """Step budgets of the three phases."""
        defaults = get_preset(self.preset).steps
        return tuple(
            default if value is None else value
            for value, default in zip(
                (self.steps_stage1, self.steps_stage2, self.steps_joint),
                defaults,
            )
        )

    @property
    def total_steps(self):
        return sum(self.budgets)

    def phase_for(self, step):
        """The phase that global step `step` belongs to."""
        stage1, stage2, _ = self.budgets
        if step < stage1:
            return 1
        if step < stage1 + stage2:
            return 2
        return 3

    def dataset_config(self):
        preset = get_preset(self.preset)
        return DatasetConfig(
            shapes=self.shapes,
            views=self.views,
            split=self.split,
            real_fraction=self.real_fraction,
            resolution=preset.resolution,
            image_size=preset.image_size,
            seed=self.seed,
        )


# -----------------------------------------------------------------------------


def _positive(**kwargs):
    return validate.Range(min=0, min_inclusive=False, **kwargs)


_UNIT = validate.Range(min=0, max=1)
_DECAY = validate.Range(min=0, max=1, min_inclusive=False)
_BUDGET = validate.Range(min=0)


class TrainConfigSchema(Schema):
    class Meta:
        unknown = RAISE

    preset = fields.String(
        load_default="desk", validate=validate.OneOf(tuple(PRESETS))
    )
    batch_size = fields.Integer(
        load_default=32, validate=validate.Range(min=2)
    )

    lr_g = fields.Float(load_default=0.005, validate=_positive())
    lr_d = fields.Float(load_default=0.001, validate=_positive())
    decay_g = fields.Float(load_default=0.995, validate=_DECAY)
    decay_d = fields.Float(load_default=0.995, validate=_DECAY)
    lr_decay_every = fields.Integer(
        load_default=1, validate=validate.Range(min=1)
    )

    steps_stage1 = fields.Integer(
        load_default=None, allow_none=True, validate=_BUDGET
    )
    steps_stage2 = fields.Integer(
        load_default=None, allow_none=True, validate=_BUDGET
    )
    steps_joint = fields.Integer(
        load_default=None, allow_none=True, validate=_BUDGET
    )

    phi2 = fields.Float(load_default=0.7, validate=_UNIT)
    phi3 = fields.Float(load_default=0.2, validate=_UNIT)
    lambda2 = fields.Float(load_default=0.01, validate=_BUDGET)
    lambda3 = fields.Float(load_default=0.01, validate=_BUDGET)
    gamma2 = fields.Float(load_default=1.15, validate=_BUDGET)
    gamma3 = fields.Float(load_default=1.15, validate=_BUDGET)
    slope = fields.Float(
        load_default=0.2, validate=_positive(max=1, max_inclusive=False)
    )

    seed = fields.Integer(load_default=0, validate=_BUDGET)
    checkpoint_every = fields.Integer(load_default=1000, validate=_BUDGET)
    prefetch = fields.Integer(load_default=2, validate=_BUDGET)

    data_dir = fields.String(load_default=None, allow_none=True)
    shapes = fields.Integer(load_default=40, validate=validate.Range(min=2))
    views = fields.Integer(load_default=24, validate=validate.Range(min=1))
    split = fields.Float(
        load_default=0.7, validate=_positive(max=1, max_inclusive=False)
    )
    real_fraction = fields.Float(load_default=0.5, validate=_UNIT)

    reuse_fc3 = fields.Boolean(load_default=False)
    literal_s_update = fields.Boolean(load_default=False)
    adaptation = fields.Boolean(load_default=True)

    @post_load
    def make_config(self, data, **kwargs):
        return TrainConfig(**data)


train_config_schema = TrainConfigSchema()

# -----------------------------------------------------------------------------


def _config_error(message, path):
    field = "/".join(map(str, path))
    reason = "unknown_key" if message == "Unknown field." else "value"
    return VxError.make_error(
        f"invalid_config.{reason}",
        f"{field}: {message}",
        source={"key": field},
    )


def parse_config_text(text, path="<text>"):
    """Parse ``key = value`` lines into a dict of strings.

    :raises VxError: On a line without ``=`` or a repeated key.
    """
    values = {}
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue

        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise VxError.usage(
                "invalid_config.syntax",
                f"{path}:{number}: expected 'key = value', got {line!r}",
                line=number,
            )
        if key in values:
            raise VxError.usage(
                "invalid_config.duplicate_key",
                f"{path}:{number}: {key} is set twice",
                line=number,
            )
        values[key] = value.strip()
    return values


def read_config_file(path):
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise VxError.usage(
            "invalid_config.missing", f"cannot read config {path}: {e}"
        ) from e
    return parse_config_text(text, path)


def parse_overrides(pairs):
    """Parse ``key=value`` strings given on the command line."""
    return parse_config_text("\n".join(pairs), "--set")


def load_train_config(path=None, overrides=None, **values):
    """Merge a config file, overrides and keyword values, then validate.

    Later sources win: file, then `overrides`, then keyword arguments that
    are not ``None``.

    :rtype: TrainConfig
    :raises VxError: With exit code 2 for unknown keys or invalid values.
    """
    data = read_config_file(path) if path is not None else {}
    data.update(overrides or {})
    data.update(
        {key: value for key, value in values.items() if value is not None}
    )

    try:
        return train_config_schema.load(data)
    except ValidationError as e:
        raise VxError.from_validation_error(
            USAGE_ERROR, e, _config_error
        ) from e


def dump_train_config(config):
    return train_config_schema.dump(config)
