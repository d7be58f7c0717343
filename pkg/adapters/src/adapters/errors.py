class AdapterError(Exception):
    """Base class for adapter failures."""

    code = "ADAPTER"


class MissingWeights(AdapterError):
    code = "MISSING_WEIGHTS"


class UndecodableImage(AdapterError):
    code = "UNDECODABLE_IMAGE"


class NoUsableImages(AdapterError):
    code = "NO_USABLE_IMAGES"


class MissingTargets(AdapterError):
    code = "MISSING_TARGETS"
