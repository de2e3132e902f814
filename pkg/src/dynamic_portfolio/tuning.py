#!/usr/bin/env python3

import itertools
import logging
from enum import Enum
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)


class SearchKind(Enum):
    """
    How hyperparameter candidates are drawn from a search space.

    Example:
        >>> SearchKind.coerce("random")
        <SearchKind.RANDOM: 'random'>
    """
    GRID = "grid"
    RANDOM = "random"

    @property
    def label(self) -> str:
        return self.value

    @classmethod
    def coerce(cls, value: Union['SearchKind', str]) -> 'SearchKind':
        if isinstance(value, cls):
            return value
        for member in cls:
            if value == member.label:
                return member
        raise ValueError(f"Invalid value for {cls.__name__}: {value}")

    def __str__(self):
        return self.label


def search_candidates(space: Mapping[str, Sequence[Any]], kind: Union[SearchKind, str] = SearchKind.GRID,
                      n_trials: Optional[int] = None, seed: int = 0) -> list[dict[str, Any]]:
    """
    Hyperparameter settings to try, one dict per candidate.

    ``grid`` enumerates the full Cartesian product of ``space`` in key order.
    ``random`` draws ``n_trials`` distinct combinations from that product
    without replacement, using ``numpy.random.default_rng(seed)``; asking for
    more trials than combinations returns every combination.

    Args:
        space (Mapping[str, Sequence]): Candidate values per hyperparameter.
        kind (SearchKind | str): Search strategy.
        n_trials (int, optional): Number of random draws (required for ``random``).
        seed (int): Random-search seed.

    Raises:
        ValueError: If the space is empty, a dimension has no values, or
            ``n_trials`` is missing or not positive for a random search.

    Example:
        >>> search_candidates({"lr": [0.1, 0.2], "epochs": [4]})
        [{'lr': 0.1, 'epochs': 4}, {'lr': 0.2, 'epochs': 4}]
    """
    kind = SearchKind.coerce(kind)
    if not space:
        raise ValueError("Search space is empty.")
    for name, values in space.items():
        if len(values) == 0:
            raise ValueError(f"Search dimension {name} has no values.")

    names = list(space)
    grid = [dict(zip(names, combo)) for combo in itertools.product(*(space[n] for n in names))]
    if kind is SearchKind.GRID:
        return grid

    if n_trials is None or n_trials < 1:
        raise ValueError(f"Random search needs a positive n_trials, got {n_trials}.")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(grid), size=min(n_trials, len(grid)), replace=False)
    logger.debug("Random search drew %d of %d combinations", len(picks), len(grid))
    return [grid[int(i)] for i in picks]
