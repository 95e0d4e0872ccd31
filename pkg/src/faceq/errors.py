"""Exception hierarchy shared by all faceq modules.

Every error carries a machine-parsable category and the process exit code
the CLI maps it to: 2 config, 3 data, 4 training divergence, 5 internal.
"""

from __future__ import annotations


class FaceqError(Exception):
    """Base class for all faceq errors."""

    category = "INTERNAL"
    exit_code = 5


class ConfigError(FaceqError):
    category = "CONFIG_ERROR"
    exit_code = 2


class DataError(FaceqError):
    category = "DATA_ERROR"
    exit_code = 3


# --- manifest / image ingestion ---------------------------------------------

class MissingFile(DataError):
    pass


class MalformedRow(DataError):
    def __init__(self, line_number: int, detail: str):
        super().__init__(f"line {line_number}: {detail}")
        self.line_number = line_number


class DuplicateId(DataError):
    def __init__(self, image_id: str):
        super().__init__(f"duplicate image_id {image_id!r}")
        self.image_id = image_id


class NonFiniteScore(DataError):
    def __init__(self, image_id: str):
        super().__init__(f"non-finite mos for image_id {image_id!r}")
        self.image_id = image_id


class EmptyManifest(DataError):
    pass


class DecodeFailure(DataError):
    def __init__(self, image_id: str, detail: str = ""):
        msg = f"cannot decode image {image_id!r}"
        super().__init__(f"{msg}: {detail}" if detail else msg)
        self.image_id = image_id


class ZeroAreaImage(DataError):
    pass


# --- models ------------------------------------------------------------------

class InconsistentSpec(ConfigError):
    pass


class MissingPretrainedWeights(ConfigError):
    pass


class ShapeMismatch(FaceqError):
    pass


# --- loss & metrics ----------------------------------------------------------

class LengthMismatch(FaceqError):
    pass


class NonFiniteInput(FaceqError):
    pass


class DegenerateInput(DataError):
    """A metric input vector is constant, so correlation is undefined."""


# --- inference / training ----------------------------------------------------

class EmptyEnsemble(ConfigError):
    pass


class EmptyTrainSet(DataError):
    pass


class DivergedLoss(FaceqError):
    category = "TRAINING_DIVERGED"
    exit_code = 4

    def __init__(self, epoch: int, batch_index: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index
