"""Exception types shared across the package."""


class SvcRecError(ValueError):
    """Base class for all svcrec errors."""


class LexiconError(SvcRecError):
    """Tokenizer or trie construction/encoding failure."""


class DecodeError(SvcRecError):
    """Constrained decoding failure (bad logits, empty trie, ...)."""


class TrainError(SvcRecError):
    """Toy model training failure (divergence, empty corpus, ...)."""


class EditError(SvcRecError):
    """Knowledge-edit failure (degenerate key, singular covariance, ...)."""
