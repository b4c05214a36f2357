class ContractViolation(ValueError):
    """
    Raised when an operation is called outside its documented preconditions
    """


class ConfigError(ValueError):
    """
    Raised for invalid configuration values or unknown configuration keys
    """


class NonFiniteError(FloatingPointError):
    """
    Raised when a NaN or Inf shows up in a gradient. The message names the op or parameter
    """


class DatasetError(RuntimeError):
    """
    Raised for missing or malformed dataset files. The message names the path
    """


class TrainingAborted(RuntimeError):
    """
    Raised when training stops on a non-finite loss. The last good state was saved to checkpoint_path
    """

    def __init__(self, message: str, checkpoint_path: str):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
