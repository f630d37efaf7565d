"""Exception hierarchy shared by all promptseg modules."""


class PromptsegError(Exception):
    """Base class for every error raised by this package."""


# --- grid / file format ---

class MissingHeader(PromptsegError):
    pass


class DimMismatch(PromptsegError):
    pass


class NonFiniteData(PromptsegError):
    pass


class BadChecksum(PromptsegError):
    pass


class LabelOutOfRange(PromptsegError):
    pass


class EmptyInput(PromptsegError):
    pass


class IndexOutOfRange(PromptsegError):
    pass


class ShapeMismatch(PromptsegError):
    pass


# --- prompts / embeddings ---

class EmptyForeground(PromptsegError):
    pass


class EmptyPrompt(PromptsegError):
    pass


class KeyNotFound(PromptsegError):
    pass


class BadTableFormat(PromptsegError):
    pass


class BadLexicon(PromptsegError):
    pass


# --- priors / losses ---

class EmptyMask(PromptsegError):
    pass


class LengthMismatch(PromptsegError):
    pass


class NonFiniteLoss(PromptsegError):
    pass


class DegenerateField(PromptsegError):
    pass


class StaleCache(PromptsegError):
    pass


# --- config / pipelines ---

class ConfigInvalid(PromptsegError):
    pass


class NoForeground(PromptsegError):
    pass


class CorpusMisaligned(PromptsegError):
    pass


class MissingPair(PromptsegError):
    pass


class BadCheckpoint(PromptsegError):
    pass


class NonFiniteGradient(PromptsegError):
    pass
