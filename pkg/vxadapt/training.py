"""The three-phase training schedule.

Phase 1 trains the 2D adversarial autoencoder (G2 against D2). Phase 2
freezes G2 and trains the voxel generator G3 against D3. Phase 3 trains all
four networks on the summed objectives. Within a step the generators update
first, then the discriminators, then the equilibrium scalars.
"""

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from marshmallow import ValidationError

from .checkpoint import (
    params_from_meta,
    params_meta,
    read_checkpoint,
    write_checkpoint,
)
from .config import dump_train_config, train_config_schema
from .dataset import PrefetchIterator, generate_dataset, load_dataset_files
from .exceptions import VxError
from .fileio import write_csv
from .losses import (
    EquilibriumState,
    LossConfig,
    LossReport,
    convergence_measure,
    d2_losses,
    d3_losses,
    g2_loss,
    g3_loss,
    rec_loss_2d,
    rec_loss_3d,
    total_losses,
)
from .networks import (
    build_network,
    discriminate,
    encode2d,
    generate3d,
    network_configs,
    reconstruct2d,
)
from .optim import AdamState, adam_step
from .schemas import (
    LOG_COLUMNS,
    AdamSettingsSchema,
    EquilibriumStateSchema,
    LossReportSchema,
)
from .tensor import INFERENCE, TRAIN, Tape, backward, stop_gradient

logger = logging.getLogger(__name__)

# -----------------------------------------------------------------------------

STAGE1 = 1
STAGE2 = 2
JOINT = 3
PHASE_NAMES = {STAGE1: "stage 1", STAGE2: "stage 2", JOINT: "joint"}

NETWORKS = ("G2", "D2", "G3", "D3")
GENERATORS = ("G2", "G3")

#: Any logged loss above this magnitude aborts training.
DIVERGENCE_LIMIT = 1e3

CHECKPOINT_FILE = "checkpoint.vxa"
LOG_FILE = "train_log.csv"

# The decoder's first dense layer, shared by G2 and G3 in name and shape.
FC3_PREFIX = "decoder.0."

adam_settings_schema = AdamSettingsSchema()
equilibrium_schema = EquilibriumStateSchema()
loss_report_schema = LossReportSchema()

# -----------------------------------------------------------------------------


@dataclass
class TrainState:
    """Everything a training run mutates.

    `step` counts completed steps; the report of a step carries the value
    `step` had before it ran.
    """

    config: object
    params: dict
    optimizers: dict
    equilibrium: EquilibriumState
    phase: int = STAGE1
    step: int = 0
    history: list = field(default_factory=list)

    @property
    def losses(self):
        # Without adaptation the adversarial 2D term is switched off.
        phi2 = self.config.phi2 if self.config.adaptation else 0.0
        return LossConfig(phi2, self.config.phi3)

    def checksums(self):
        return {name: self.params[name].checksum() for name in NETWORKS}


def _optimizer(config, name, params):
    if name in GENERATORS:
        base_rate, decay = config.lr_g, config.decay_g
    else:
        base_rate, decay = config.lr_d, config.decay_d
    return AdamState(
        params, base_rate, decay, decay_every=config.lr_decay_every
    )


def init_state(config):
    """Build the four networks and their optimizers from the config seed.

    :rtype: TrainState
    """
    configs = network_configs(config.preset, config.slope)
    seeds = np.random.SeedSequence(config.seed).generate_state(len(NETWORKS))
    params = {
        name: build_network(configs[name], int(seed))
        for name, seed in zip(NETWORKS, seeds)
    }
    return TrainState(
        config=config,
        params=params,
        optimizers={
            name: _optimizer(config, name, params[name]) for name in NETWORKS
        },
        equilibrium=EquilibriumState(
            lambda2=config.lambda2,
            lambda3=config.lambda3,
            gamma2=config.gamma2,
            gamma3=config.gamma3,
        ),
    )


def _reuse_fc3(state):
    g2 = state.params["G2"]
    g3 = state.params["G3"]
    updates = {
        name: g2[name]
        for name in g2
        if name.startswith(FC3_PREFIX) and name in g3
    }
    state.params["G3"] = g3.replace(updates)
    logger.info("initialized G3 %s from G2", sorted(updates))


def start_phase(state, phase):
    """Move the state into `phase`; phases only advance."""
    if phase == state.phase:
        return
    if phase < state.phase:
        raise VxError.data(
            "training.phase",
            f"cannot return from phase {state.phase} to phase {phase}",
        )

    if state.config.reuse_fc3 and state.phase < STAGE2 <= phase:
        _reuse_fc3(state)

    logger.info(
        "step %d: %s -> %s",
        state.step,
        PHASE_NAMES[state.phase],
        PHASE_NAMES[phase],
    )
    state.phase = phase


# -----------------------------------------------------------------------------


@dataclass
class _Forward2D:
    latent_w: object
    latent_wv: object
    out_w: object
    out_wv: object
    rec_w: object
    rec_wv: object
    adv: object
    loss: object


@dataclass
class _Forward3D:
    gen_w: object
    gen_wv: object
    rec3: object
    adv: object
    loss: object


def _forward_2d(w, w_v, g2, d2, losses):
    latent_w, out_w = reconstruct2d(w, g2, TRAIN)
    latent_wv, out_wv = reconstruct2d(w_v, g2, TRAIN)
    rec_w = rec_loss_2d(w, out_w)
    rec_wv = rec_loss_2d(w_v, out_wv)
    # D2 only scores here; its running statistics stay untouched.
    _, adv = discriminate(out_w, d2, 2, TRAIN, update_stats=False)
    return _Forward2D(
        latent_w,
        latent_wv,
        out_w,
        out_wv,
        rec_w,
        rec_wv,
        adv,
        g2_loss(rec_w, rec_wv, adv, losses),
    )


def _forward_3d(latent_w, latent_wv, v_w, g3, d3, losses):
    gen_w = generate3d(latent_w, g3, TRAIN)
    gen_wv = generate3d(latent_wv, g3, TRAIN)
    rec3 = rec_loss_3d(gen_wv, v_w)
    _, adv_w = discriminate(gen_w, d3, 3, TRAIN, update_stats=False)
    _, adv_wv = discriminate(gen_wv, d3, 3, TRAIN, update_stats=False)
    adv = 0.5 * (adv_w + adv_wv)
    return _Forward3D(gen_w, gen_wv, rec3, adv, g3_loss(rec3, adv, losses))


def _discriminate_2d(out_w, out_wv, d2, eq):
    _, score_fake = discriminate(stop_gradient(out_w), d2, 2, TRAIN)
    _, score_synth = discriminate(stop_gradient(out_wv), d2, 2, TRAIN)
    loss, k_next = d2_losses(score_fake, score_synth, eq)
    m2 = convergence_measure(score_synth, score_fake, eq.gamma2)
    return loss, k_next, m2


def _discriminate_3d(gen_w, gen_wv, v_w, d3, eq, literal):
    _, score_real = discriminate(v_w, d3, 3, TRAIN)
    _, score_w = discriminate(stop_gradient(gen_w), d3, 3, TRAIN)
    _, score_wv = discriminate(stop_gradient(gen_wv), d3, 3, TRAIN)
    loss, s_next = d3_losses(score_real, score_w, score_wv, eq, literal)
    m3 = convergence_measure(
        score_real, 0.5 * (float(score_w) + float(score_wv)), eq.gamma3
    )
    return loss, s_next, m3


def _apply_updates(state, grads):
    """Take one Adam step per network, generators first."""
    for name, network_grads in grads.items():
        state.params[name] = adam_step(
            state.params[name], network_grads, state.optimizers[name]
        )


def _report(state, **values):
    return LossReport(
        step=state.step,
        phase=state.phase,
        **{
            key: None if value is None else float(value)
            for key, value in values.items()
        },
    )


# -----------------------------------------------------------------------------


def _stage1(state, w, w_v, v_w):
    g2 = state.params["G2"]
    d2 = state.params["D2"]
    eq = state.equilibrium
    lr_g = state.optimizers["G2"].learning_rate
    lr_d = state.optimizers["D2"].learning_rate

    with Tape() as tape:
        tape.watch(g2)
        f2 = _forward_2d(w, w_v, g2, d2, state.losses)
    grads_g2 = backward(tape, f2.loss, g2)

    with Tape() as tape:
        tape.watch(d2)
        d2_loss, k_next, m2 = _discriminate_2d(f2.out_w, f2.out_wv, d2, eq)
    grads_d2 = backward(tape, d2_loss, d2)

    _apply_updates(state, {"G2": grads_g2, "D2": grads_d2})
    state.equilibrium = eq.with_k(k_next)
    return _report(
        state,
        rec2_w=f2.rec_w,
        rec2_wv=f2.rec_wv,
        adv_g2=f2.adv,
        g2=f2.loss,
        d2=d2_loss,
        k=state.equilibrium.k,
        total_g=f2.loss,
        total_d=d2_loss,
        m2=m2,
        lr_g=lr_g,
        lr_d=lr_d,
    )


def _stage2(state, w, w_v, v_w):
    g2 = state.params["G2"]
    g3 = state.params["G3"]
    d3 = state.params["D3"]
    eq = state.equilibrium
    lr_g = state.optimizers["G3"].learning_rate
    lr_d = state.optimizers["D3"].learning_rate

    # G2 is frozen: inference mode, outside any tape.
    latent_w = encode2d(w, g2, INFERENCE)
    latent_wv = encode2d(w_v, g2, INFERENCE)

    with Tape() as tape:
        tape.watch(g3)
        f3 = _forward_3d(latent_w, latent_wv, v_w, g3, d3, state.losses)
    grads_g3 = backward(tape, f3.loss, g3)

    with Tape() as tape:
        tape.watch(d3)
        d3_loss, s_next, m3 = _discriminate_3d(
            f3.gen_w, f3.gen_wv, v_w, d3, eq, state.config.literal_s_update
        )
    grads_d3 = backward(tape, d3_loss, d3)

    _apply_updates(state, {"G3": grads_g3, "D3": grads_d3})
    state.equilibrium = eq.with_s(s_next)
    return _report(
        state,
        rec3=f3.rec3,
        adv_g3=f3.adv,
        g3=f3.loss,
        d3=d3_loss,
        s=state.equilibrium.s,
        total_g=f3.loss,
        total_d=d3_loss,
        m3=m3,
        lr_g=lr_g,
        lr_d=lr_d,
    )


def _joint(state, w, w_v, v_w):
    g2, g3 = state.params["G2"], state.params["G3"]
    d2, d3 = state.params["D2"], state.params["D3"]
    eq = state.equilibrium
    lr_g = state.optimizers["G2"].learning_rate
    lr_d = state.optimizers["D2"].learning_rate
    lr_g3 = state.optimizers["G3"].learning_rate
    lr_d3 = state.optimizers["D3"].learning_rate

    with Tape() as tape:
        tape.watch(g2, g3)
        f2 = _forward_2d(w, w_v, g2, d2, state.losses)
        f3 = _forward_3d(
            f2.latent_w, f2.latent_wv, v_w, g3, d3, state.losses
        )
        loss_g = f2.loss + f3.loss
    grads_g2, grads_g3 = backward(tape, loss_g, [g2, g3])

    with Tape() as tape:
        tape.watch(d2, d3)
        d2_loss, k_next, m2 = _discriminate_2d(f2.out_w, f2.out_wv, d2, eq)
        d3_loss, s_next, m3 = _discriminate_3d(
            f3.gen_w, f3.gen_wv, v_w, d3, eq, state.config.literal_s_update
        )
        loss_d = d2_loss + d3_loss
    grads_d2, grads_d3 = backward(tape, loss_d, [d2, d3])

    _apply_updates(
        state,
        {"G2": grads_g2, "G3": grads_g3, "D2": grads_d2, "D3": grads_d3},
    )
    state.equilibrium = eq.with_k(k_next).with_s(s_next)
    report = _report(
        state,
        rec2_w=f2.rec_w,
        rec2_wv=f2.rec_wv,
        adv_g2=f2.adv,
        g2=f2.loss,
        d2=d2_loss,
        k=state.equilibrium.k,
        rec3=f3.rec3,
        adv_g3=f3.adv,
        g3=f3.loss,
        d3=d3_loss,
        s=state.equilibrium.s,
        m2=m2,
        m3=m3,
        lr_g=lr_g,
        lr_d=lr_d,
        lr_g3=lr_g3,
        lr_d3=lr_d3,
    )
    report.total_g, report.total_d = total_losses(report)
    return report


# -----------------------------------------------------------------------------


def _unpack(batch):
    if isinstance(batch, (tuple, list)):
        return tuple(batch) + (None,) * (3 - len(batch))
    return batch.w, batch.w_v, batch.v_w


def _check_finite(report):
    for key, value in report.values().items():
        if math.isfinite(value) and abs(value) <= DIVERGENCE_LIMIT:
            continue

        logger.error(
            "training diverged at step %d (phase %d): %s=%r",
            report.step,
            report.phase,
            key,
            value,
        )
        raise VxError.data(
            "training.diverged",
            f"{key}={value!r} is not finite or exceeds {DIVERGENCE_LIMIT}",
            component=key,
        )


def _snapshot(state):
    # Batch-norm buffers are rebound inside the live sets during a step.
    return (
        {name: params.replace({}) for name, params in state.params.items()},
        {name: adam.copy() for name, adam in state.optimizers.items()},
        state.equilibrium,
    )


def _restore(state, snapshot):
    state.params, state.optimizers, state.equilibrium = snapshot


def _run_step(state, phase, step_fn, batch):
    snapshot = _snapshot(state)
    try:
        if state.phase != phase:
            raise VxError.data(
                "training.phase",
                f"{PHASE_NAMES[phase]} step requested in phase "
                f"{state.phase}",
            )
        report = step_fn(state, *_unpack(batch))
        _check_finite(report)
    except VxError as e:
        _restore(state, snapshot)
        raise e.update({"phase": state.phase, "step": state.step})

    state.step += 1
    state.history.append(report)
    logger.debug("step %d: %s", report.step, report.values())
    return report


def train_step_stage1(batch, state):
    """One stage-1 step on ``(w, w_V)``: update G2, then D2, then ``k``.

    :rtype: LossReport
    :raises VxError: If the state is not in phase 1, or a loss is
        non-finite or diverges; the error carries ``phase`` and ``step``.
    """
    return _run_step(state, STAGE1, _stage1, batch)


def train_step_stage2(batch, state):
    """One stage-2 step on ``(w, w_V, v_w)`` with G2 frozen.

    Updates G3, then D3, then ``s``.
    """
    return _run_step(state, STAGE2, _stage2, batch)


def train_step_joint(batch, state):
    """One joint step: G2 and G3 on L_G, then D2 and D3 on L_D."""
    return _run_step(state, JOINT, _joint, batch)


STEP_FUNCTIONS = {
    STAGE1: train_step_stage1,
    STAGE2: train_step_stage2,
    JOINT: train_step_joint,
}

# -----------------------------------------------------------------------------


def _network_arrays(name, state):
    params = state.params[name]
    optimizer = state.optimizers[name]
    arrays = {f"{name}/{key}": value for key, value in params.items()}
    for key in params.trainable_names:
        arrays[f"{name}/adam.m/{key}"] = optimizer.first_moment[key]
        arrays[f"{name}/adam.v/{key}"] = optimizer.second_moment[key]
    return arrays


def save_checkpoint(state, path):
    """Write the complete training state, history included."""
    arrays = {}
    for name in NETWORKS:
        arrays.update(_network_arrays(name, state))

    meta = {
        "config": dump_train_config(state.config),
        "phase": state.phase,
        "step": state.step,
        "equilibrium": equilibrium_schema.dump(state.equilibrium),
        "networks": {
            name: params_meta(state.params[name]) for name in NETWORKS
        },
        "optimizers": {
            name: adam_settings_schema.dump(state.optimizers[name])
            for name in NETWORKS
        },
        "history": loss_report_schema.dump(state.history, many=True),
    }
    write_checkpoint(path, "train_state", meta, arrays)
    logger.info("checkpoint at step %d written to %s", state.step, path)


def _load_network(name, meta, arrays, path):
    prefix = f"{name}/"
    own = {
        key[len(prefix) :]: value
        for key, value in arrays.items()
        if key.startswith(prefix)
    }
    param_arrays = {
        key: value for key, value in own.items() if not key.startswith("adam.")
    }
    params = params_from_meta(meta["networks"][name], param_arrays, path)

    settings = adam_settings_schema.load(meta["optimizers"][name])
    optimizer = AdamState(
        params,
        settings["base_rate"],
        settings["decay"],
        decay_every=settings["decay_every"],
        beta1=settings["beta1"],
        beta2=settings["beta2"],
        epsilon=settings["epsilon"],
    )
    optimizer.step = settings["step"]
    optimizer.first_moment = {
        key: own[f"adam.m/{key}"] for key in params.trainable_names
    }
    optimizer.second_moment = {
        key: own[f"adam.v/{key}"] for key in params.trainable_names
    }
    return params, optimizer


def load_checkpoint(path):
    """Read a state written by :py:func:`save_checkpoint`.

    :rtype: TrainState
    """
    meta, arrays = read_checkpoint(path, "train_state")
    try:
        params = {}
        optimizers = {}
        for name in NETWORKS:
            params[name], optimizers[name] = _load_network(
                name, meta, arrays, path
            )
        return TrainState(
            config=train_config_schema.load(meta["config"]),
            params=params,
            optimizers=optimizers,
            equilibrium=equilibrium_schema.load(meta["equilibrium"]),
            phase=meta["phase"],
            step=meta["step"],
            history=loss_report_schema.load(meta["history"], many=True),
        )
    except (KeyError, TypeError, ValidationError) as e:
        raise VxError.data(
            "invalid_format.manifest",
            f"training state in {path} is incomplete: {e}",
            path=str(path),
        ) from e


def write_log(path, history):
    write_csv(path, LOG_COLUMNS, loss_report_schema.dump(history, many=True))


def _save_outputs(state, out_dir):
    save_checkpoint(state, os.path.join(out_dir, CHECKPOINT_FILE))
    write_log(os.path.join(out_dir, LOG_FILE), state.history)


# -----------------------------------------------------------------------------


def dataset_for(config):
    """Load the config's data directory, or generate the dataset."""
    if config.data_dir is not None:
        return load_dataset_files(config.data_dir)
    return generate_dataset(config.dataset_config())


def run_schedule(config, dataset=None, out_dir=None, state=None):
    """Run the phases in order until every budget is spent.

    :param TrainConfig config: The run configuration.
    :param Dataset dataset: Defaults to :py:func:`dataset_for`.
    :param str out_dir: If given, receives the checkpoint (at every
        ``checkpoint_every`` steps and at the end) and the CSV log.
    :param TrainState state: A loaded state to resume from.
    :rtype: TrainState
    """
    if dataset is None:
        dataset = dataset_for(config)
    if state is None:
        state = init_state(config)
    else:
        state.config = config

    total = config.total_steps
    logger.info(
        "training %s for %s steps from step %d",
        config.preset,
        "/".join(map(str, config.budgets)),
        state.step,
    )

    batches = dataset.batches(
        config.batch_size,
        config.seed,
        start=state.step,
        stop=total,
        adaptation=config.adaptation,
    )
    if config.prefetch:
        batches = PrefetchIterator(batches, config.prefetch)

    try:
        for batch in batches:
            start_phase(state, config.phase_for(state.step))
            STEP_FUNCTIONS[state.phase](batch, state)

            if (
                out_dir is not None
                and config.checkpoint_every
                and state.step % config.checkpoint_every == 0
                and state.step < total
            ):
                _save_outputs(state, out_dir)
    finally:
        if isinstance(batches, PrefetchIterator):
            batches.close()

    if out_dir is not None:
        _save_outputs(state, out_dir)
    return state
