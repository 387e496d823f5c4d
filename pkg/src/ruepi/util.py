"""
Logging setup, atomic file output and array checks shared by the pipeline stages.
"""
import hashlib
import json
import logging
import logging.config
import os
import tempfile

import numpy as np

from .exceptions import DataError, DimensionError

PACKAGE_LOGGING_CONFIG = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'config', 'logging.json')


def setup_logging(config_file_path=PACKAGE_LOGGING_CONFIG, log_level=logging.INFO):
    """
    Logging configuration helper.

    :param config_file_path: file path to logging configuration file.
    https://docs.python.org/3/library/logging.config.html#object-connections
    :param log_level: level applied to the 'ruepi' logger after the configuration is loaded.
    :return: None - access the logger by name as described in the config--or the "root" logger as a backup.
    """
    try:
        with open(config_file_path, 'rt') as f:
            config = json.load(f)
        logging.config.dictConfig(config)
    except (ValueError, IOError, OSError):
        # json.JSONDecodeError is a subclass of ValueError
        logging.basicConfig(level=log_level)
        logging.root.exception(
            "Could not load specified logging configuration '{}'. Verify the filepath exists and is compliant with: "
            "[https://docs.python.org/3/library/logging.config.html#object-connections]".format(config_file_path))
    logging.getLogger('ruepi').setLevel(log_level)


def atomic_write(path, writer, mode='w'):
    """
    Write a file through a temporary sibling and rename it into place.

    :param path: destination file.
    :param writer: callable receiving the open temporary file object.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix='.' + os.path.basename(path) + '.', dir=directory)
    try:
        kwargs = {} if 'b' in mode else {'encoding': 'utf-8', 'newline': ''}
        with os.fdopen(fd, mode, **kwargs) as f:
            writer(f)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def write_json(path, payload):
    atomic_write(path, lambda f: f.write(json.dumps(payload, indent=2, sort_keys=True) + '\n'))


def read_json(path):
    if not os.path.isfile(path):
        raise DataError("Required file '{}' not found; run the producing stage first".format(path))
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def write_frame(path, frame):
    """ CSV with full float precision so a reload reproduces every value. """
    atomic_write(path, lambda f: frame.to_csv(f, index=False, float_format='%.17g', lineterminator='\n'))


def array_checksum(arrays):
    digest = hashlib.sha256()
    for arr in arrays:
        digest.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return digest.hexdigest()


def as_matrix(values, name, n_cols=None):
    """
    Coerce to a 2-d float array and check its column count.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1 and n_cols is not None and arr.size == n_cols:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError("'{}' must be a 2-d array, got shape {}".format(name, arr.shape))
    if n_cols is not None and arr.shape[1] != n_cols:
        raise DimensionError("'{}' has {} columns, expected {}".format(name, arr.shape[1], n_cols))
    return arr
