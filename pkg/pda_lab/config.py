"""
Flat `key=value` configuration files, perturbation-unit parsing and seed fan-out.
"""
from typing import Dict, Iterable, Optional

import hashlib

import numpy as np

import logging
logger = logging.getLogger(__name__)


def parse_config_lines(lines: Iterable[str], allowed: Optional[Iterable[str]] = None,
                       source: str = "<config>") -> Dict[str, str]:
    """
    Parse `key=value` lines. `#` starts a comment, blank lines are skipped, whitespace around keys and values is
    stripped.

    :param lines: text lines
    :param allowed: accepted keys (None accepts any key)
    :param source: name used in error messages
    :return: ordered key/value map
    """
    allowed = None if allowed is None else set(allowed)
    values = dict()
    for number, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError("{}:{}: expected key=value, got '{}'".format(source, number, line))
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError("{}:{}: empty key".format(source, number))
        if allowed is not None and key not in allowed:
            raise ValueError("{}:{}: unknown key '{}' (allowed: {})".format(source, number, key,
                                                                          ", ".join(sorted(allowed))))
        if key in values:
            logger.warning("{}:{}: '{}' given twice, using the later value".format(source, number, key))
        values[key] = value
    return values


def read_config(path: str, allowed: Optional[Iterable[str]] = None) -> Dict[str, str]:
    """
    Read a flat `key=value` file (fail-closed on unknown keys when `allowed` is given).
    """
    with open(path, "r") as f:
        return parse_config_lines(f.read().splitlines(), allowed, source=path)


def write_config(path: str, values: Dict[str, object]):
    with open(path, "w") as f:
        for key, value in values.items():
            f.write("{}={}\n".format(key, value))


def derive_seed(seed: int, label: str) -> int:
    """
    Per-component seed: the global seed XOR the first four bytes of SHA-256(label). Streams of different labels are
    independent, so adding a component never shifts the randomness of the others.
    """
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return (int(seed) ^ int.from_bytes(digest[:4], "little")) & 0xFFFFFFFFFFFFFFFF


def rng_for(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, label))


def eps_from_255(value: float) -> float:
    """CLI perturbation units: a value of 8 means 8/255."""
    return float(value) / 255.


def parse_eps(value: object) -> float:
    """
    L∞ perturbation size as written in PGD plans and names: values >= 1 are in /255 units, smaller values are
    absolute (so `8` is 8/255 and `0.3` is 0.3). PDA magnitudes are L2 norms and are read as written.
    """
    v = float(value)
    if v < 0:
        raise ValueError("perturbation size must be non-negative, got {}".format(value))
    return v / 255. if v >= 1 else v
