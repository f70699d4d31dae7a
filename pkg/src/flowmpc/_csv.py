"""CSV helpers shared by the producing modules."""

import csv


class SchemaError(ValueError):
    """A CSV file does not carry the expected header."""


def fmt(v):
    """17 significant digits so floats round-trip exactly."""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return v
    if v is None:
        return ""
    return f"{float(v):.17g}"


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_rows(path, header):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            found = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if tuple(found) != tuple(header):
            raise SchemaError(f"{path}: expected columns {','.join(header)}, found {','.join(found)}")
        return [row for row in reader if row]


def parse_bool(s):
    if s in ("true", "True", "1"):
        return True
    if s in ("false", "False", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")
