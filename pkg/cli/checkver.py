import cli.util

# Check python version here. The library uses 3.10 union syntax (float | None)
# in its dataclasses, so imports fail on older interpreters. Kept in a separate
# file so library modules stay importable without side-effects.
cli.util.require_python_version(3, 10)
