# File: tests/__init__.py

"""Tests package for mragp.

Model builders from tests.helpers.components and assertions from
tests.test_utils are re-exported at the package level.
"""

from typing import List

from . import test_utils as _test_utils
from .helpers import components as _components

__all__: List[str] = []

for _module in (_test_utils, _components):
    for _name in getattr(_module, "__all__", []):
        globals()[_name] = getattr(_module, _name)
        __all__.append(_name)

globals().pop("_module", None)
globals().pop("_name", None)
