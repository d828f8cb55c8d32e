import pathlib

import appdirs

package_user_dir = pathlib.Path(appdirs.user_data_dir('moelab'))
package_user_dir.mkdir(parents=True, exist_ok=True)


def get_cache_dir() -> pathlib.Path:
    """Return the download cache directory (created on demand)."""
    cache_dir = package_user_dir / 'cache'
    cache_dir.mkdir(parents=True, exist_ok=True)
    return cache_dir


def get_runs_dir() -> pathlib.Path:
    """Return the default directory for run outputs of library callers."""
    runs_dir = package_user_dir / 'runs'
    runs_dir.mkdir(parents=True, exist_ok=True)
    return runs_dir
