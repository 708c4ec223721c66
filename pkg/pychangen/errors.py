"""pychangen errors"""


class ChangenError(Exception):
  """pychangen errors, raised by a single module."""

  error_code = 0

  def __init__(
    self,
    message: str,
    module: str = "",
    error_code: int = None,
  ):
    super().__init__(message)
    self.message = message
    self.module = module
    if error_code is not None:
      self.error_code = error_code

  def __repr__(self) -> str:
    return f"{self.__class__.__name__}('{self.message}')"


class DimensionError(ChangenError, ValueError):
  """Shapes or sizes that do not line up."""

  error_code = 1


class ParameterError(ChangenError, ValueError):
  """A parameter outside its valid range."""

  error_code = 2


class InstanceLookupError(ChangenError, KeyError):
  """Instance id not present in an InstanceMap."""

  error_code = 3

  def __str__(self) -> str:
    return self.message


class ConfigurationError(ChangenError):
  """Incompatible configuration, conditions or checkpoint."""

  error_code = 4


class ChecksumError(ChangenError):
  error_code = 5


class SchemaVersionError(ChangenError):
  error_code = 6


class LeakageError(ChangenError):
  """Training and held-out data share scene seeds."""

  error_code = 7


class EmptyDatasetError(ChangenError):
  error_code = 8


class CheckpointError(ChangenError):
  error_code = 9


class StorageError(ChangenError):
  error_code = 10


_ERROR_TABLE = {
  1: ("Dimension mismatch", DimensionError),
  2: ("Invalid parameter", ParameterError),
  3: ("Unknown instance id", InstanceLookupError),
  4: ("Incompatible configuration", ConfigurationError),
  5: ("Checksum failure", ChecksumError),
  6: ("Schema version mismatch", SchemaVersionError),
  7: ("Scene seed ranges overlap", LeakageError),
  8: ("Empty dataset", EmptyDatasetError),
  9: ("Corrupted checkpoint", CheckpointError),
  10: ("Output directory not writable", StorageError),
}


def error_code_to_exception(module: str, error_code: int) -> ChangenError:
  """Convert an error code to an exception"""
  if error_code in _ERROR_TABLE:
    message, cls = _ERROR_TABLE[error_code]
    return cls(message, module, error_code)

  return ChangenError(f"Unknown error code {error_code}", module, error_code)
