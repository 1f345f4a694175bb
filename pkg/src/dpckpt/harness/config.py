"""Plain-text experiment configuration.

Files hold one `key = value` assignment per line, UTF-8, with `#`
starting a comment (whole-line or trailing). Keys are dotted lowercase
names. Every key must be consumed by the task that runs: a leftover key
is a config error naming the key, which catches both typos and options
that do not apply to the chosen task.
"""

import math

from ..errors import ConfigError

_MISSING = object()

_TRUE_WORDS = frozenset(("true", "yes", "on", "1"))
_FALSE_WORDS = frozenset(("false", "no", "off", "0"))


def parse_config_text(text: str) -> dict[str, str]:
    """Parse config text to an ordered key -> raw string value map."""
    values: dict[str, str] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw_line.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in values:
            raise ConfigError("assigned more than once", key=key)
        values[key] = value
    return values


def load_config(path: str) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


class ConfigView:
    """Typed access to parsed config values with used-key tracking."""

    def __init__(self, values: dict[str, str]):
        self._values = dict(values)
        self._used: set[str] = set()

    def _lookup(self, key: str, default):
        self._used.add(key)
        if key in self._values:
            return self._values[key]
        if default is _MISSING:
            raise ConfigError("required key is missing", key=key)
        return default

    def has(self, key: str) -> bool:
        return key in self._values

    def get_str(self, key: str, default=_MISSING) -> str:
        value = self._lookup(key, default)
        return value if isinstance(value, str) else value

    def get_int(self, key: str, default=_MISSING) -> int:
        value = self._lookup(key, default)
        if not isinstance(value, str):
            return value
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"expected an integer, got {value!r}", key=key) from None

    def get_float(self, key: str, default=_MISSING) -> float:
        value = self._lookup(key, default)
        if not isinstance(value, str):
            return value
        return self._parse_float(key, value)

    def _parse_float(self, key: str, text: str) -> float:
        word = text.strip().lower()
        if word in ("inf", "infinity"):
            return math.inf
        try:
            return float(word)
        except ValueError:
            raise ConfigError(f"expected a number, got {text!r}", key=key) from None

    def get_bool(self, key: str, default=_MISSING) -> bool:
        value = self._lookup(key, default)
        if not isinstance(value, str):
            return value
        word = value.strip().lower()
        if word in _TRUE_WORDS:
            return True
        if word in _FALSE_WORDS:
            return False
        raise ConfigError(f"expected a boolean, got {value!r}", key=key)

    def _split(self, text: str) -> list[str]:
        return [part.strip() for part in text.split(",") if part.strip()]

    def get_str_list(self, key: str, default=_MISSING) -> list[str]:
        value = self._lookup(key, default)
        if not isinstance(value, str):
            return value
        return self._split(value)

    def get_int_list(self, key: str, default=_MISSING) -> list[int]:
        value = self._lookup(key, default)
        if not isinstance(value, str):
            return value
        out = []
        for part in self._split(value):
            try:
                out.append(int(part))
            except ValueError:
                raise ConfigError(f"expected integers, got {part!r}", key=key) from None
        return out

    def get_float_list(self, key: str, default=_MISSING) -> list[float]:
        value = self._lookup(key, default)
        if not isinstance(value, str):
            return value
        return [self._parse_float(key, part) for part in self._split(value)]

    def get_float_pairs(self, key: str, default=_MISSING) -> list[tuple[float, float]]:
        """Comma-separated colon pairs, e.g. "20:20, 0.01:0.01"."""
        value = self._lookup(key, default)
        if not isinstance(value, str):
            return value
        pairs = []
        for part in self._split(value):
            pieces = part.split(":")
            if len(pieces) != 2:
                raise ConfigError(f"expected 'a:b' pairs, got {part!r}", key=key)
            pairs.append((self._parse_float(key, pieces[0]), self._parse_float(key, pieces[1])))
        return pairs

    def unused_keys(self) -> list[str]:
        return sorted(set(self._values) - self._used)

    def ensure_all_used(self) -> None:
        leftover = self.unused_keys()
        if leftover:
            raise ConfigError("unknown key for this task", key=leftover[0])
