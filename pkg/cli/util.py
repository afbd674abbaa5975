import sys
import click


def require_python_version(major, minor):
    vi = sys.version_info
    if (vi.major, vi.minor) < (major, minor):
        sys.stderr.write(
            "ERROR: Python version too old (%d.%d required but %d.%d installed)\n" % (
                major, minor,
                vi.major, vi.minor
            )
        )
        exit(1)


class SampleCountType(click.ParamType):
    """Sample count given as a plain integer or as a power of two (2^14, 2**14)"""

    name = "count"

    def convert(self, value, param, ctx):
        if isinstance(value, int):
            num = value
        else:
            text = value.strip().replace("**", "^")
            try:
                if "^" in text:
                    base, exp = text.split("^", 1)
                    num = int(base) ** int(exp)
                else:
                    num = int(text)
            except ValueError:
                self.fail(f"Invalid sample count {value!r} (examples: 1024, 2^14)", param, ctx)
        if num < 1:
            self.fail(f"Sample count must be positive, got {num}", param, ctx)
        return num


def pretty_size(size):
    for unit in ["", "KB", "MB", "GB", "TB"]:
        if size < 1024.0:
            break
        size /= 1024.0
    return f"{size:3.2f}{unit}"


def pretty_duration(seconds):
    minutes, seconds = divmod(seconds, 60.0)
    if minutes >= 60:
        hours, minutes = divmod(minutes, 60.0)
        return f"{hours:.0f}h{minutes:02.0f}m{seconds:02.0f}s"
    if minutes:
        return f"{minutes:.0f}m{seconds:04.1f}s"
    return f"{seconds:.2f}s"
