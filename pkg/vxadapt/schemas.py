"""Schemas for every structured record written to or read from disk."""

from marshmallow import (
    EXCLUDE,
    RAISE,
    Schema,
    fields,
    post_load,
    pre_load,
    validate,
)

from .fields import DelimitedList, LayerSpecs
from .losses import EquilibriumState, LossReport
from .networks import NetworkConfig

# -----------------------------------------------------------------------------

LOG_COLUMNS = (
    "step",
    "phase",
    "L_rec2_w",
    "L_rec2_wV",
    "L_G2",
    "L_D2",
    "k",
    "L_rec3",
    "L_G3",
    "L_D3",
    "s",
    "L_G",
    "L_D",
    "M2",
    "M3",
    "lr_G",
    "lr_D",
    "lr_G3",
    "lr_D3",
)

MANIFEST_COLUMNS = (
    "item_id",
    "kind",
    "path",
    "azimuth",
    "pair_id",
    "split",
)
IOU_COLUMNS = ("item_id", "category", "iou", "aligned_iou")
RETRIEVAL_COLUMNS = (
    "query_id",
    "rank",
    "item_id",
    "shape_id",
    "distance",
)
SWEEP_COLUMNS = ("phi2", "real_l1", "synth_l1", "confusion")
COMPARISON_COLUMNS = ("pipeline", "domain", "iou", "aligned_iou")

KINDS = ("voxel", "synth", "real", "output", "prediction", "truth", "input")
SPLITS = ("train", "real", "test", "")

# -----------------------------------------------------------------------------


class BlankAsNoneSchema(Schema):
    """Loads empty CSV cells as missing values."""

    @pre_load
    def blank_to_none(self, data, **kwargs):
        return {
            key: (None if value == "" else value)
            for key, value in data.items()
        }


# -----------------------------------------------------------------------------


class NetworkConfigSchema(Schema):
    class Meta:
        unknown = RAISE

    name = fields.String(required=True)
    encoder_specs = LayerSpecs(required=True)
    decoder_specs = LayerSpecs(required=True)
    input_shape = DelimitedList(fields.Integer(), required=True)
    latent_dim = fields.Integer(required=True, validate=validate.Range(min=1))
    output_shape = DelimitedList(fields.Integer(), required=True)
    slope = fields.Float(load_default=0.2)
    output_kernel = fields.Integer(load_default=3)
    batch_norm = fields.Boolean(load_default=True)

    @post_load
    def make_config(self, data, **kwargs):
        return NetworkConfig(**data)


class EquilibriumStateSchema(Schema):
    k = fields.Float(required=True)
    s = fields.Float(required=True)
    lambda2 = fields.Float(required=True)
    lambda3 = fields.Float(required=True)
    gamma2 = fields.Float(required=True)
    gamma3 = fields.Float(required=True)
    lower = fields.Float(required=True)
    upper = fields.Float(required=True)

    @post_load
    def make_state(self, data, **kwargs):
        return EquilibriumState(**data)


class AdamSettingsSchema(Schema):
    base_rate = fields.Float(required=True)
    decay = fields.Float(required=True)
    decay_every = fields.Integer(required=True)
    beta1 = fields.Float(required=True)
    beta2 = fields.Float(required=True)
    epsilon = fields.Float(required=True)
    step = fields.Integer(required=True)


class CheckpointEntrySchema(Schema):
    name = fields.String(required=True)
    shape = fields.List(fields.Integer(), required=True)
    dtype = fields.String(required=True, validate=validate.Equal("<f8"))


class CheckpointManifestSchema(Schema):
    kind = fields.String(
        required=True, validate=validate.OneOf(("weights", "train_state"))
    )
    meta = fields.Dict(keys=fields.String(), required=True)
    entries = fields.List(fields.Nested(CheckpointEntrySchema), required=True)


# -----------------------------------------------------------------------------


class ManifestRowSchema(BlankAsNoneSchema):
    item_id = fields.Integer(required=True)
    kind = fields.String(required=True, validate=validate.OneOf(KINDS))
    path = fields.String(required=True)
    azimuth = fields.Float(allow_none=True, load_default=None)
    pair_id = fields.Integer(allow_none=True, load_default=None)
    split = fields.String(
        allow_none=True, load_default=None, validate=validate.OneOf(SPLITS)
    )


class LossReportSchema(BlankAsNoneSchema):
    class Meta:
        unknown = EXCLUDE

    step = fields.Integer(required=True)
    phase = fields.Integer(required=True)
    rec2_w = fields.Float(data_key="L_rec2_w", allow_none=True)
    rec2_wv = fields.Float(data_key="L_rec2_wV", allow_none=True)
    adv_g2 = fields.Float(allow_none=True)
    g2 = fields.Float(data_key="L_G2", allow_none=True)
    d2 = fields.Float(data_key="L_D2", allow_none=True)
    k = fields.Float(allow_none=True)
    rec3 = fields.Float(data_key="L_rec3", allow_none=True)
    adv_g3 = fields.Float(allow_none=True)
    g3 = fields.Float(data_key="L_G3", allow_none=True)
    d3 = fields.Float(data_key="L_D3", allow_none=True)
    s = fields.Float(allow_none=True)
    total_g = fields.Float(data_key="L_G", allow_none=True)
    total_d = fields.Float(data_key="L_D", allow_none=True)
    m2 = fields.Float(data_key="M2", allow_none=True)
    m3 = fields.Float(data_key="M3", allow_none=True)
    lr_g = fields.Float(data_key="lr_G", allow_none=True)
    lr_d = fields.Float(data_key="lr_D", allow_none=True)
    lr_g3 = fields.Float(data_key="lr_G3", allow_none=True)
    lr_d3 = fields.Float(data_key="lr_D3", allow_none=True)

    @post_load
    def make_report(self, data, **kwargs):
        return LossReport(**data)


class IoURowSchema(Schema):
    item_id = fields.Integer(required=True)
    category = fields.String(allow_none=True)
    iou = fields.Float(required=True)
    aligned_iou = fields.Float(allow_none=True)


class SweepRowSchema(Schema):
    phi2 = fields.Float(required=True)
    real_l1 = fields.Float(required=True)
    synth_l1 = fields.Float(required=True)
    confusion = fields.Float(required=True)


class RetrievalRowSchema(Schema):
    query_id = fields.Integer(required=True)
    rank = fields.Integer(required=True)
    item_id = fields.Integer(required=True)
    shape_id = fields.Integer(allow_none=True)
    distance = fields.Float(required=True)


class ComparisonRowSchema(Schema):
    pipeline = fields.String(required=True)
    domain = fields.String(required=True)
    iou = fields.Float(required=True)
    aligned_iou = fields.Float(required=True)
