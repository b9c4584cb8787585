import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Optional, Set, Tuple

from torch import nn

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ParamEntry:
    name: str
    shape: Tuple[int, ...]
    trainable: bool

    @property
    def numel(self) -> int:
        return math.prod(self.shape)


class ParamRegistry:
    """
    Flat, ordered catalog of named parameters. Ordering follows module
    registration order, so identical configs always enumerate identically.
    """

    def __init__(self, entries: Iterable[ParamEntry]):
        self.entries: List[ParamEntry] = list(entries)
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            duplicates = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"Duplicate parameter names in registry: {duplicates}")
        self._index: Dict[str, ParamEntry] = {e.name: e for e in self.entries}

    @classmethod
    def from_module(cls, module: nn.Module, prefix: str = "") -> "ParamRegistry":
        entries = [
            ParamEntry(
                name=f"{prefix}{name}",
                shape=tuple(param.shape),
                trainable=param.requires_grad,
            )
            for name, param in module.named_parameters()
        ]
        return cls(entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ParamEntry]:
        return iter(self.entries)

    def __contains__(self, name: object) -> bool:
        return name in self._index

    def __getitem__(self, name: str) -> ParamEntry:
        return self._index[name]

    def names(self) -> List[str]:
        return [e.name for e in self.entries]

    def total(self) -> int:
        return sum(e.numel for e in self.entries)

    def count(self, names: Optional[Iterable[str]] = None) -> int:
        """Number of scalars in `names` (all entries when omitted)."""
        if names is None:
            return self.total()
        wanted = set(names)
        unknown = wanted - set(self._index)
        if unknown:
            raise KeyError(f"Names not in registry: {sorted(unknown)[:5]}")
        return sum(self._index[n].numel for n in wanted)

    def trainable_names(self) -> Set[str]:
        return {e.name for e in self.entries if e.trainable}

    def merged(self, other: "ParamRegistry") -> "ParamRegistry":
        return ParamRegistry(self.entries + other.entries)

