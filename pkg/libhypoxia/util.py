import csv
import json
import math
import hashlib

import numpy as np


class Serialize:
    """Dict/JSON conversion for dataclasses.

    numpy arrays are stored as (nested) lists and restored from the field
    annotation; nested Serialize dataclasses are converted recursively.
    """

    @classmethod
    def from_dict(cls, data):
        res = {}
        for k, v in cls.__dataclass_fields__.items():
            if k not in data:
                continue
            res[k] = data[k]
            if v.type in (np.ndarray, "np.ndarray"):
                res[k] = np.asarray(res[k], dtype=float)
            elif isinstance(v.type, type) and issubclass(v.type, Serialize) and isinstance(res[k], dict):
                res[k] = v.type.from_dict(res[k])
        return cls(**res)

    def to_dict(self):
        res = {}
        for k in self.__dataclass_fields__:
            res[k] = plain(getattr(self, k))
        return res

    @classmethod
    def from_json(cls, data):
        return cls.from_dict(json.loads(data))

    def to_json(self):
        return dump_json(self.to_dict())


def plain(value):
    """Convert numpy scalars/arrays and Serialize objects into JSON-able values.

    Non-finite floats become None so the emitted JSON stays standard.
    """
    if isinstance(value, Serialize):
        return value.to_dict()
    if isinstance(value, np.ndarray):
        return [plain(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [plain(v) for v in value]
    if isinstance(value, dict):
        return {str(k): plain(v) for k, v in value.items()}
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def dump_json(data):
    # float repr is the shortest string that parses back to the same double
    return json.dumps(plain(data), indent=2, allow_nan=False) + "\n"


def fmt17(value):
    return f"{float(value):.17g}"


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fd:
        writer = csv.writer(fd, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt17(v) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv_columns(path):
    with open(path, newline="") as fd:
        reader = csv.reader(fd)
        header = next(reader, None)
        if not header:
            raise ValueError(f"{path}: empty csv file")
        cols = {name.strip(): [] for name in header}
        names = list(cols)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(names):
                raise ValueError(f"{path}:{lineno}: expected {len(names)} columns but found {len(row)}")
            for name, val in zip(names, row):
                cols[name].append(float(val))
    return {k: np.asarray(v, dtype=float) for k, v in cols.items()}


def sha256_file(path, chunksize=1 << 16):
    h = hashlib.sha256()
    with open(path, "rb") as fd:
        for chunk in iter(lambda: fd.read(chunksize), b""):
            h.update(chunk)
    return h.hexdigest()
