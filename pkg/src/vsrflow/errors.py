"""Exception types shared across the package.

Each class carries a short ``category`` string; the CLI reports it in its
machine-readable error line.
"""


class VsrError(Exception):
    category = "error"


class ShapeError(VsrError, ValueError):
    category = "shape"


class ContractError(VsrError, ValueError):
    category = "contract"


class ConfigError(VsrError, ValueError):
    category = "config"


class NonFiniteError(VsrError, FloatingPointError):
    category = "nonfinite"


class FormatError(VsrError, ValueError):
    category = "format"
