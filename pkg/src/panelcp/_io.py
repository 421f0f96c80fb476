import json
import os
import tempfile
from contextlib import contextmanager


@contextmanager
def atomic_open(path, mode="w", newline=None):
    """Open a temp file next to ``path`` and rename it into place on success.

    On any exception the temp file is removed and ``path`` is left untouched.
    """
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, mode, newline=newline) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def write_json(path, obj):
    with atomic_open(path) as fh:
        json.dump(obj, fh, indent=2, allow_nan=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
