"""Exception types shared across the toolkit.

Every error that a pipeline stage can surface has a named class here so
that callers (and the CLI) can report failures by name instead of by
string matching.
"""


class CoatError(Exception):
    """Base class for all toolkit errors."""


# --- chain construction / execution ---

class ChainError(CoatError):
    """Base for reasoning-chain validation and execution failures."""


class EmptyChain(ChainError):
    pass


class SelectNotFirst(ChainError):
    pass


class NonTerminalEnd(ChainError):
    pass


class ArityUnderflow(ChainError):
    pass


class EntityAbsent(ChainError):
    pass


class ConfigInvalid(CoatError):
    pass


class EmptyQuestion(CoatError):
    pass


# --- selection ---

class ConceptUnderpopulated(CoatError):
    """A sample's concept has no other members to draw demonstrations from."""


class InsufficientSamples(CoatError):
    pass


# --- prompt formatting ---

class TagCollision(CoatError):
    """A demo text contains a format tag at line start and escaping is off."""


class MalformedPrompt(CoatError):
    pass


# --- scorers ---

class ScorerFailure(CoatError):
    """Base for likelihood-provider failures."""


class LookupMiss(ScorerFailure):
    pass


class RemoteUnavailable(ScorerFailure):
    pass


class RemoteMalformed(ScorerFailure):
    pass


class EmptyTarget(ScorerFailure):
    pass


# --- micro language model ---

class ContextOverflow(CoatError):
    pass


class DivergenceDetected(CoatError):
    pass


# --- evaluation harness ---

class EmptyEvalSet(CoatError):
    pass


class LabelSpaceTooLarge(CoatError):
    pass


class NoDerangement(CoatError):
    pass


class TaskSetMismatch(CoatError):
    pass


# --- CLI / artifact plumbing ---

class UsageError(CoatError):
    pass


class DigestMismatch(CoatError):
    """An artifact's recorded config digest differs from the supplied config."""
