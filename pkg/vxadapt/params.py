import numpy as np

from .exceptions import VxError
from .tensor import Tensor, current_tape
from .utils import array_digest

# -----------------------------------------------------------------------------


class ParameterSet:
    """The named arrays of one network.

    Names are ordered, and each name is either trainable or a buffer (such as
    batch-norm running statistics). A parameter set is never mutated by
    optimization: :py:meth:`replace` returns a new set sharing untouched
    arrays.

    :param arrays: Ordered mapping of name to array.
    :param trainable: The names that receive gradients.
    :param config: The :py:class:`~vxadapt.networks.NetworkConfig` the set
        was built for, if any.
    """

    def __init__(self, arrays, trainable, config=None):
        self._arrays = {
            name: np.asarray(value, dtype=np.float64)
            for name, value in arrays.items()
        }
        self._trainable = tuple(trainable)

        unknown = set(self._trainable) - set(self._arrays)
        if unknown:
            raise VxError.data(
                "invalid_params.trainable",
                f"trainable names {sorted(unknown)} have no array",
            )

        self.config = config

    @property
    def names(self):
        return tuple(self._arrays)

    @property
    def trainable_names(self):
        return self._trainable

    @property
    def buffer_names(self):
        trainable = set(self._trainable)
        return tuple(name for name in self._arrays if name not in trainable)

    def __getitem__(self, name):
        try:
            return self._arrays[name]
        except KeyError as e:
            raise VxError.data(
                "invalid_params.missing", f"no parameter named {name!r}"
            ) from e

    def __contains__(self, name):
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def tensor(self, name):
        """Return a parameter as a tensor for a forward pass.

        Inside a tape that watches this set, trainable parameters come back
        as that tape's leaves; otherwise they are constants.
        """
        tape = current_tape()
        if (
            tape is not None
            and tape.is_watching(self)
            and name in self._trainable
        ):
            return tape.leaf(self, name)
        return Tensor(self[name])

    def replace(self, updates):
        """Return a new set with some arrays replaced."""
        arrays = dict(self._arrays)
        for name, value in updates.items():
            value = np.asarray(value, dtype=np.float64)
            if value.shape != self[name].shape:
                raise VxError.data(
                    "invalid_params.shape",
                    f"{name} has shape {self[name].shape}, got {value.shape}",
                )
            arrays[name] = value
        return ParameterSet(arrays, self._trainable, self.config)

    def set_buffer(self, name, value):
        """Rebind a buffer in place; used for batch-norm running statistics."""
        if name in self._trainable:
            raise VxError.data(
                "invalid_params.buffer", f"{name} is trainable, not a buffer"
            )
        self._arrays[name] = np.asarray(value, dtype=np.float64)

    def copy(self):
        return ParameterSet(
            {name: value.copy() for name, value in self._arrays.items()},
            self._trainable,
            self.config,
        )

    def parameter_count(self):
        return sum(self._arrays[name].size for name in self._trainable)

    def checksum(self):
        return array_digest(self._arrays.values())

    def __repr__(self):
        name = self.config.name if self.config is not None else "?"
        return (
            f"ParameterSet({name}, {len(self._trainable)} trainable, "
            f"{len(self.buffer_names)} buffers)"
        )
