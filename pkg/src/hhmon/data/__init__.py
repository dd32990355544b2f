"""Bundled scenarios and fixtures."""

from importlib import resources


def has(name: str) -> bool:
    return resources.files(__name__).joinpath(name).is_file()


def read_text(name: str) -> str:
    return resources.files(__name__).joinpath(name).read_text(encoding="utf-8")


def path(name: str):
    return resources.files(__name__).joinpath(name)
