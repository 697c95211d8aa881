"""Exception type shared across the exporter.

Everything that can go wrong here — unreadable files, malformed headers,
incomplete name maps, shape mismatches — is a validation failure of the
inputs. The CLI maps it to exit code 2.
"""


class ValidationError(ValueError):
    """Inputs, file contents, or configuration violate a documented precondition."""
