from typing import Sequence

import numpy as np

from ..diffcore import Parameter, ParamClass, seeded_init


def init_parameter(shape: Sequence[int], variance: float, rng, param_class=ParamClass.HIDDEN,
                   distribution: str = 'truncated-normal') -> Parameter:
    """A new parameter drawn from ``rng``; all zeros when ``rng`` is None."""
    if rng is None:
        return Parameter(np.zeros(tuple(shape)), param_class)
    return Parameter(seeded_init(shape, distribution, variance, rng).data, param_class)
