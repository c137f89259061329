"""Zero-reference low-light enhancement with a learned image prior and
content/context semantic guidance."""

__version__ = "0.1.0"
