"""Exception hierarchy shared by every stage of the pipeline."""


class CodecLMError(Exception):
    """Base class; the CLI turns these into structured error messages."""


# jpeg_stream
class DimensionError(CodecLMError):
    pass


class MalformedStream(CodecLMError):
    pass


class UnsupportedStream(CodecLMError):
    pass


class UnrecoverableStream(CodecLMError):
    pass


# bbpe / corpus
class CorpusTooSmall(CodecLMError):
    pass


class InvalidTokenId(CodecLMError):
    pass


class EmptyCorpus(CodecLMError):
    pass


class VocabMismatch(CodecLMError):
    pass


# model / training / sampling
class ConfigError(CodecLMError):
    pass


class ContextOverflow(CodecLMError):
    pass


class NonFiniteLoss(CodecLMError):
    def __init__(self, message: str, step: int | None = None, last_checkpoint: str | None = None):
        super().__init__(message)
        self.step = step
        self.last_checkpoint = last_checkpoint


class CheckpointError(CodecLMError):
    pass


# evaluation
class DimensionMismatch(CodecLMError):
    pass


class TooFewSamples(CodecLMError):
    pass
