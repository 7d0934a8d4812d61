"""Fixed expression taxonomies."""

from __future__ import annotations

from dataclasses import dataclass, field

COMPOUND_NAMES = (
    "Angrily Surprised",
    "Disgustedly Surprised",
    "Fearfully Surprised",
    "Happily Surprised",
    "Sadly Angry",
    "Sadly Fearful",
    "Sadly Surprised",
)

SINGLE_NAMES = (
    "Anger",
    "Contempt",
    "Disgust",
    "Fear",
    "Happiness",
    "Neutral",
    "Sadness",
    "Surprise",
)


@dataclass(frozen=True)
class LabelSpace:
    """Ordered class names with a name <-> index bijection."""

    key: str
    names: tuple[str, ...]
    _lookup: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate class names in {self.key!r}")
        object.__setattr__(self, "_lookup", {n: i for i, n in enumerate(self.names)})

    @property
    def size(self) -> int:
        return len(self.names)

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self._lookup[name]

    def name(self, index: int) -> str:
        if not 0 <= index < len(self.names):
            raise IndexError(f"label index {index} out of range for {self.key!r}")
        return self.names[index]

    def __contains__(self, name):
        return name in self._lookup


COMPOUND = LabelSpace("compound", COMPOUND_NAMES)
SINGLE = LabelSpace("single", SINGLE_NAMES)

_SPACES = {"compound": COMPOUND, "single": SINGLE}


def get_label_space(key: str) -> LabelSpace:
    try:
        return _SPACES[key]
    except KeyError:
        raise ValueError(f"unknown taxonomy {key!r}; expected one of {sorted(_SPACES)}") from None
