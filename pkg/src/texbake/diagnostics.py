import sys


def warn(message):
    print(f"WARN: {message}", file=sys.stderr)


def error(message):
    print(f"ERROR: {message}", file=sys.stderr)
