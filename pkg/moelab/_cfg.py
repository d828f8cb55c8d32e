from typing import Dict

CONFIG = {
    'dtype': 'float64',
    'fd_step': 1e-4,
    'rg_threshold': 0.1,
    'rg_ema_decay': 0.9,
}
_VALIDATORS = {
    'dtype': lambda x: x in ('float64', 'float32'),
    'fd_step': lambda x: x > 0,
    'rg_threshold': lambda x: x > 0,
    'rg_ema_decay': lambda x: 0 <= x < 1,
}


class set_config:
    """Set the configuration parameters.

    Can be used as a context manager, in which case the previous values are
    restored on exit:

    >>> with set_config(dtype='float32'):
    ...     pass
    """

    def __init__(self, **kwargs):
        self.old = {}
        for k, v in kwargs.items():
            if k not in CONFIG:
                raise KeyError(f'Not a configuration key: "{k}"')
            if k in _VALIDATORS and not _VALIDATORS[k](v):
                raise ValueError(f'Config parameter "{k}" has invalid value: "{v}"')
            self.old[k] = CONFIG[k]
        self._update(kwargs)

    def __enter__(self):
        return

    def __exit__(self, *args, **kwargs):
        self._update(self.old)

    def _update(self, options_dict: Dict):
        CONFIG.update(options_dict)


def get_config(key=None):
    """Return the configuration parameters."""
    if key is None:
        return CONFIG
    return CONFIG[key]
