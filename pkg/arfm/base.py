import typing


class ArfmBase(object):
    """ Artifact identified by a content key: episodes by seed, datasets and checkpoints by digest. """

    def __init__(self) -> None:
        self.id = None

    def identity(self) -> typing.Hashable:
        return self.id

    def __hash__(self) -> int:
        return hash((type(self).__name__, self.identity()))

    def __eq__(self, other) -> bool:
        if not isinstance(other, type(self)):
            return NotImplemented
        return self.identity() == other.identity()
