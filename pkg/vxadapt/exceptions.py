import logging
import traceback

from .utils import iter_validation_errors

# -----------------------------------------------------------------------------

#: Exit code for errors caused by data: shapes, values, files.
DATA_ERROR = 1
#: Exit code for errors caused by how the program was invoked.
USAGE_ERROR = 2

# -----------------------------------------------------------------------------


class VxError(Exception):
    """A VX-Adapt exception.

    Every failure the package reports deliberately is a `VxError`. The error
    carries an exit code for the command line and one or more error dicts,
    each with a machine-readable ``code`` and usually a human-readable
    ``detail``.

    If the root logger is at DEBUG level, the body will also contain the full
    traceback under the ``debug`` property.

    :param int exit_code: The process exit code when raised out of the CLI.
    :param dict errors: Error dicts, e.g. ``{"code": "invalid_shape"}``.
    """

    def __init__(self, exit_code, *errors):
        self.exit_code = exit_code
        self.body = {"errors": list(errors) or [{"code": "unknown"}]}

        if logging.getLogger().isEnabledFor(logging.DEBUG):
            self.body["debug"] = traceback.format_exc()

        super().__init__(self.describe())

    @classmethod
    def data(cls, code, detail=None, **extra):
        """Build a data error with a single error dict."""
        return cls(DATA_ERROR, cls.make_error(code, detail, **extra))

    @classmethod
    def usage(cls, code, detail=None, **extra):
        """Build a usage error with a single error dict."""
        return cls(USAGE_ERROR, cls.make_error(code, detail, **extra))

    @staticmethod
    def make_error(code, detail=None, **extra):
        error = {"code": code}
        if detail is not None:
            error["detail"] = detail
        error.update(extra)
        return error

    @classmethod
    def from_validation_error(cls, exit_code, error, format_validation_error):
        return cls(
            exit_code,
            *(
                format_validation_error(message, path)
                for message, path in iter_validation_errors(error.messages)
            ),
        )

    @property
    def errors(self):
        return self.body["errors"]

    @property
    def code(self):
        """The code of the first error."""
        return self.errors[0]["code"]

    def update(self, additional):
        """Add additional metadata to the error.

        Can be chained with further updates.

        :param dict additional: The additional metadata
        :return: The :py:class:`VxError` that :py:meth:`update` was called on
        :rtype: :py:class:`VxError`
        """
        for error in self.errors:
            error.update(additional)

        self.args = (self.describe(),)

        # Allow e.g. `raise e.update(additional)`.
        return self

    def describe(self):
        return "; ".join(
            ", ".join(f"{key}={value}" for key, value in error.items())
            for error in self.errors
        )
