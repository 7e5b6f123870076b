"""Exception types shared across the package."""


class HiFormerError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(HiFormerError):
    pass


class UnknownModel(HiFormerError):
    pass


class InvalidConfig(HiFormerError):
    pass


class IndivisibleInput(HiFormerError):
    pass


class IndivisibleGrid(HiFormerError):
    pass


class OddGrid(HiFormerError):
    pass


class BadGroupCount(HiFormerError):
    pass


class EmptyTokens(HiFormerError):
    pass


class LabelOutOfRange(HiFormerError):
    pass


class NonFiniteTensor(HiFormerError):
    pass


class NonFiniteGradient(HiFormerError):
    pass


class DivergedLoss(HiFormerError):
    def __init__(self, step, value):
        super().__init__(f"loss became non-finite at step {step}: {value}")
        self.step = step
        self.value = value


class BadMagic(HiFormerError):
    pass


class CorruptCheckpoint(HiFormerError):
    pass


class MissingTensor(HiFormerError):
    pass


class UnexpectedTensor(HiFormerError):
    pass


class UnsupportedFormat(HiFormerError):
    pass


class CorruptHeader(HiFormerError):
    pass


class BadManifest(HiFormerError):
    pass
