#!/usr/bin/env python3


def get_version() -> str | None:
    from importlib.metadata import PackageNotFoundError, version

    try:
        return version("matchkit")
    except PackageNotFoundError:
        return None
